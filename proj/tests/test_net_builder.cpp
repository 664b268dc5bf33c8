// Builder tests: stage parameter counts against the published architecture
// tables, the brute-force parameter census oracle, FLOP accounting, and
// forward shapes.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pocketnet/net_builder.hpp"

using namespace pocketnet;

namespace {

Genotype shipped() { return parse_genotype_file(SOURCE_DIR "/pocketnet.genotype"); }

Genotype random_genotype(Rng& rng, int n_intermediate = 4) {
    Genotype g;
    g.n_intermediate = n_intermediate;
    auto fill = [&](std::vector<Genotype::NodeSpec>& nodes) {
        for (int j = 0; j < n_intermediate; ++j) {
            Genotype::NodeSpec spec;
            int p0 = static_cast<int>(rng.uniform_int(j + 2));
            int p1 = static_cast<int>(rng.uniform_int(j + 2));
            for (int e = 0; e < 2; ++e) {
                OpKind k;
                do {
                    k = kAllOps[rng.uniform_int(kNumOps)];
                } while (k == OpKind::zero);
                spec.edges[e] = {e == 0 ? p0 : p1, k};
            }
            nodes.push_back(spec);
        }
    };
    fill(g.normal);
    fill(g.reduce);
    return g;
}

// independent oracle: walk every Parameter and sum buffer lengths
long brute_force_params(const PocketNet& net) {
    long total = 0;
    for (const auto& p : net.parameters()) total += p->value.numel();
    return total;
}

VariantSpec tiny_variant(int embedding = 64) {
    VariantSpec v;
    v.name = "custom";
    v.stem_channels = 16;
    v.n_normal_per_stage = {1, 1, 1};
    v.embedding_dim = embedding;
    v.input_size = 32;
    return v;
}

}  // namespace

TEST_CASE("non-cell stage counts match the S and M tables exactly") {
    auto g = shipped();
    auto s = count_report(g, VariantSpec::named("S-128"));
    REQUIRE(s.rows.size() == 10);
    CHECK(s.rows[0].params == 1856);    // stem
    CHECK(s.rows[7].params == 264192);  // head
    CHECK(s.rows[8].params == 26112);   // gdc
    CHECK(s.rows[9].params == 65792);   // embedding

    auto m = count_report(g, VariantSpec::named("M-128"));
    CHECK(m.rows[0].params == 3712);
    CHECK(m.rows[7].params == 526848);
    CHECK(m.rows[8].params == 26112);
    CHECK(m.rows[9].params == 65792);

    // genotype-independent: the same holds for random cells
    Rng rng(21);
    for (int i = 0; i < 5; ++i) {
        auto rep = count_report(random_genotype(rng), VariantSpec::named("S-128"));
        CHECK(rep.rows[0].params == 1856);
        CHECK(rep.rows[7].params == 264192);
        CHECK(rep.rows[8].params == 26112);
        CHECK(rep.rows[9].params == 65792);
    }
}

TEST_CASE("embedding-width delta is exactly 65792 for both variants") {
    auto g = shipped();
    const long s128 = count_report(g, VariantSpec::named("S-128")).total_params;
    const long s256 = count_report(g, VariantSpec::named("S-256")).total_params;
    const long m128 = count_report(g, VariantSpec::named("M-128")).total_params;
    const long m256 = count_report(g, VariantSpec::named("M-256")).total_params;
    CHECK(s256 - s128 == 65792);  // 512*128 + 2*128
    CHECK(m256 - m128 == 65792);

    Rng rng(22);
    for (int i = 0; i < 3; ++i) {
        auto rg = random_genotype(rng);
        CHECK(count_report(rg, VariantSpec::named("S-256")).total_params -
                  count_report(rg, VariantSpec::named("S-128")).total_params ==
              65792);
    }
}

TEST_CASE("shipped genotype totals sit within the soft windows") {
    auto g = shipped();
    auto rep = count_report(g, VariantSpec::named("S-128"));
    CHECK(std::abs(rep.total_params - 925632.0) / 925632.0 < 0.02);
    const double mflops = rep.total_flops / 1e6;
    CHECK(std::abs(mflops - 587.11) / 587.11 < 0.15);
}

TEST_CASE("count_params equals the brute-force parameter walk") {
    Rng rng(23);
    auto g = shipped();
    for (const char* name : {"S-128", "S-256", "M-128", "M-256"}) {
        PocketNet net(g, VariantSpec::named(name), rng);
        CHECK(count_params(net) == brute_force_params(net));
    }
    for (int i = 0; i < 50; ++i) {
        auto rg = random_genotype(rng);
        PocketNet net(rg, tiny_variant(), rng);
        CHECK(count_params(net) == brute_force_params(net));
    }
}

TEST_CASE("forward shapes: S-128 embeds to 128-D with a 512x7x7 pre-gdc map") {
    Rng rng(24);
    auto g = shipped();
    auto rep = count_report(g, VariantSpec::named("S-128"));
    CHECK(rep.rows[7].out_shape == std::array<int, 3>{512, 7, 7});  // head output
    CHECK(rep.rows[6].out_shape == std::array<int, 3>{512, 7, 7});  // last reduction

    auto mrep = count_report(g, VariantSpec::named("M-128"));
    CHECK(mrep.rows[6].out_shape == std::array<int, 3>{1024, 7, 7});  // pre-head map

    PocketNet tiny(g, tiny_variant(96), rng);
    Rng drng(7);
    auto x = Tensor::randn({2, 3, 32, 32}, drng, 0.5f);
    auto emb = tiny.forward(x, false);
    CHECK(emb.shape() == std::vector<int>{2, 96});
    for (float v : emb.data()) CHECK(std::isfinite(v));
}

TEST_CASE("summarize layout matches the table: 10 rows, S repeats 6/5/4") {
    auto g = shipped();
    auto rep = count_report(g, VariantSpec::named("S-128"));
    CHECK(rep.rows.size() == 10);
    CHECK(rep.rows[1].repeat == 6);
    CHECK(rep.rows[3].repeat == 5);
    CHECK(rep.rows[5].repeat == 4);
    CHECK(rep.rows[2].repeat == 1);
    long sum = 0;
    for (const auto& r : rep.rows) sum += r.params;
    CHECK(sum == rep.total_params);
    auto text = summarize(rep);
    CHECK(text.find("1856") != std::string::npos);

    auto m = count_report(g, VariantSpec::named("M-128"));
    CHECK(m.rows[1].repeat == 3);
    CHECK(m.rows[3].repeat == 2);
    CHECK(m.rows[5].repeat == 1);
}

TEST_CASE("flop accounting definitional cases") {
    // 1x1 conv, 4 -> 4 channels on a 4x4 map: 2*4*4*16 = 512 FLOPs for the
    // conv alone
    const long conv_macs = op_macs(OpKind::conv_1x1, 4, 1, 4, 4);
    const long prelu_macs = 4 * 16, bn_macs = 4 * 16;
    CHECK(2 * (conv_macs - prelu_macs - bn_macs) == 512);
    CHECK(op_macs(OpKind::zero, 16, 1, 8, 8) == 0);
    CHECK(op_macs(OpKind::identity, 16, 1, 8, 8) == 0);
}

TEST_CASE("builder rejects input sizes the gdc cannot cover") {
    auto g = shipped();
    auto v = VariantSpec::named("S-128");
    v.input_size = 50;
    CHECK_THROWS_AS(count_report(g, v), DataError);
    Rng rng(1);
    CHECK_THROWS_AS(PocketNet(g, v, rng), DataError);
}

TEST_CASE("embedding output is finite for random inputs in [-1, 1]") {
    Rng rng(25);
    auto g = shipped();
    PocketNet net(g, tiny_variant(), rng);
    for (int trial = 0; trial < 3; ++trial) {
        std::vector<float> pix(2 * 3 * 32 * 32);
        for (auto& p : pix) p = rng.uniform(-1.0f, 1.0f);
        auto x = Tensor::from_data({2, 3, 32, 32}, pix);
        auto emb = net.forward(x, false);
        CHECK(emb.dim(1) == 64);
        for (float v : emb.data()) CHECK(std::isfinite(v));
    }
}
