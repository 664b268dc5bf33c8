// Search-space tests: candidate op semantics, parameter census per op,
// softmax-mixed edges, cell forward shapes, genotype grammar.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "pocketnet/search_space.hpp"

using namespace pocketnet;

namespace {

const char* kToyGenotype =
    "genotype v1\n"
    "nodes 4\n"
    "normal:\n"
    "node2: sep_conv_3(0), sep_conv_5(1)\n"
    "node3: sep_conv_3(1), max_pool_3(0)\n"
    "node4: sep_conv_5(2), sep_conv_3(1)\n"
    "node5: avg_pool_3(0), sep_conv_5(3)\n"
    "reduce:\n"
    "node2: identity(0), identity(1)\n"
    "node3: sep_conv_3(2), max_pool_3(0)\n"
    "node4: sep_conv_3(2), identity(3)\n"
    "node5: sep_conv_3(4), identity(2)\n";

Genotype all_identity_genotype() {
    Genotype g;
    g.n_intermediate = 4;
    for (int j = 0; j < 4; ++j) {
        Genotype::NodeSpec spec;
        spec.edges[0] = {0, OpKind::identity};
        spec.edges[1] = {1, OpKind::identity};
        g.normal.push_back(spec);
        g.reduce.push_back(spec);
    }
    return g;
}

}  // namespace

TEST_CASE("op_forward: zero emits zeros of the strided target shape") {
    Rng rng(1);
    auto x = Tensor::randn({1, 8, 6, 6}, rng);
    auto z1 = make_op(OpKind::zero, 8, 1, "z", rng)->forward(x, false);
    CHECK(z1.shape() == x.shape());
    for (float v : z1.data()) CHECK(v == 0.0f);
    auto z2 = make_op(OpKind::zero, 8, 2, "z", rng)->forward(x, false);
    CHECK(z2.shape() == std::vector<int>{1, 8, 3, 3});
}

TEST_CASE("op_forward: identity at stride 1 is exact passthrough") {
    Rng rng(2);
    auto x = Tensor::randn({2, 4, 5, 5}, rng);
    auto y = make_op(OpKind::identity, 4, 1, "id", rng)->forward(x, false);
    CHECK(y.data() == x.data());
}

TEST_CASE("op_forward: sep convs preserve spatial size at stride 1") {
    Rng rng(3);
    auto x = Tensor::randn({1, 8, 6, 6}, rng);
    for (OpKind k : {OpKind::sep_conv_3, OpKind::sep_conv_5, OpKind::sep_conv_7,
                     OpKind::conv_1x1, OpKind::max_pool_3, OpKind::avg_pool_3}) {
        auto op = make_op(k, 8, 1, "op", rng);
        auto y = op->forward(x, false);
        CHECK(y.shape() == x.shape());
    }
}

TEST_CASE("op_param_count composition") {
    CHECK(op_param_count(OpKind::zero, 16, 1) == 0);
    // sep_conv_3 at C=16: 16 (prelu) + 144 (dw) + 256 (pw) + 32 (bn)
    CHECK(op_param_count(OpKind::sep_conv_3, 16, 1) == 448);
    CHECK(op_param_count(OpKind::max_pool_3, 16, 1) == 32);
    CHECK(op_param_count(OpKind::avg_pool_3, 16, 1) == 32);
    CHECK(op_param_count(OpKind::conv_1x1, 16, 1) == 16 + 256 + 32);
    CHECK(op_param_count(OpKind::identity, 16, 1) == 0);
    CHECK(op_param_count(OpKind::identity, 16, 2) == 256 + 32);
    CHECK(op_param_count(OpKind::sep_conv_5, 16, 1) == 16 + 400 + 256 + 32);
    CHECK(op_param_count(OpKind::sep_conv_7, 16, 1) == 16 + 784 + 256 + 32);
}

TEST_CASE("op_param_count matches the parameters an instance actually owns") {
    Rng rng(4);
    for (OpKind k : kAllOps)
        for (int stride : {1, 2}) {
            auto op = make_op(k, 12, stride, "x", rng);
            std::vector<ParamPtr> ps;
            op->collect_params(ps);
            long walked = 0;
            for (const auto& p : ps) walked += p->value.numel();
            CHECK(walked == op_param_count(k, 12, stride));
        }
}

TEST_CASE("mixed_forward: equal alphas give the unweighted op mean") {
    Rng rng(5);
    auto mixed = MixedOp::make(4, 1, "m", rng);
    auto x = Tensor::randn({1, 4, 6, 6}, rng);
    auto alpha = Tensor::full({kNumOps}, 0.7f);
    auto out = mixed.forward(alpha, x, false);

    std::vector<float> mean(out.numel(), 0.0f);
    for (auto& op : mixed.ops) {
        auto y = op->forward(x, false);
        for (int i = 0; i < out.numel(); ++i) mean[i] += y.data()[i] / kNumOps;
    }
    for (int i = 0; i < out.numel(); ++i)
        CHECK(out.data()[i] == doctest::Approx(mean[i]).epsilon(2e-5));
}

TEST_CASE("softmax weights: [ln 3, 0] over two ops -> [0.75, 0.25]") {
    auto w = softmax(Tensor::from_data({2}, {std::log(3.0f), 0.0f}));
    CHECK(w.data()[0] == doctest::Approx(0.75f));
    CHECK(w.data()[1] == doctest::Approx(0.25f));
}

TEST_CASE("mixed_forward: saturated alphas reproduce the single op") {
    Rng rng(6);
    auto mixed = MixedOp::make(4, 1, "m", rng);
    auto x = Tensor::randn({1, 4, 5, 5}, rng);
    for (int hot : {0, 3, 6}) {
        std::vector<float> a(kNumOps, -50.0f);
        a[hot] = 50.0f;
        auto out = mixed.forward(Tensor::from_data({kNumOps}, a), x, false);
        auto ref = mixed.ops[hot]->forward(x, false);
        for (int i = 0; i < out.numel(); ++i)
            CHECK(std::abs(out.data()[i] - ref.data()[i]) < 1e-4f);
    }
}

TEST_CASE("mixed_forward rejects non-finite alphas") {
    Rng rng(7);
    auto mixed = MixedOp::make(4, 1, "m", rng);
    auto x = Tensor::randn({1, 4, 5, 5}, rng);
    std::vector<float> a(kNumOps, 0.0f);
    a[2] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(mixed.forward(Tensor::from_data({kNumOps}, a), x, false), NumericError);
}

TEST_CASE("discrete cell: all-identity genotype is predecessor-sum algebra") {
    Rng rng(8);
    auto g = all_identity_genotype();
    auto cell = DiscreteCell::make(g, 16, 16, 16, CellKind::normal, false, "c", rng);
    auto p2 = Tensor::randn({1, 16, 6, 6}, rng);
    auto p1 = Tensor::randn({1, 16, 6, 6}, rng);
    auto out = cell.forward(p2, p1, false);
    CHECK(out.shape() == std::vector<int>{1, 16, 6, 6});  // 4 nodes x width 4

    auto s0 = cell.pre0.forward(p2, false);
    auto s1 = cell.pre1.forward(p1, false);
    // every node sums inputs 0 and 1, so each concat slice equals s0 + s1
    const int w = 4, hw = 36;
    for (int node = 0; node < 4; ++node)
        for (int c = 0; c < w; ++c)
            for (int i = 0; i < hw; ++i) {
                const float expect = s0.data()[c * hw + i] + s1.data()[c * hw + i];
                CHECK(out.data()[(node * w + c) * hw + i] == doctest::Approx(expect));
            }
}

TEST_CASE("cell shapes: normal preserves, reduction halves spatial and doubles channels") {
    Rng rng(9);
    auto g = parse_genotype_text(kToyGenotype);
    auto normal = DiscreteCell::make(g, 64, 64, 64, CellKind::normal, false, "n", rng);
    auto p2 = Tensor::randn({1, 64, 8, 8}, rng);
    auto p1 = Tensor::randn({1, 64, 8, 8}, rng);
    CHECK(normal.forward(p2, p1, false).shape() == std::vector<int>{1, 64, 8, 8});

    auto red = DiscreteCell::make(g, 64, 64, 128, CellKind::reduction, false, "r", rng);
    CHECK(red.forward(p2, p1, false).shape() == std::vector<int>{1, 128, 4, 4});
}

TEST_CASE("supernet cell with saturated alphas equals the discrete cell") {
    Rng rng(10);
    auto g = parse_genotype_text(kToyGenotype);
    for (CellKind kind : {CellKind::normal, CellKind::reduction}) {
        const int c_cell = kind == CellKind::normal ? 16 : 32;
        auto super = SuperCell::make(16, 16, c_cell, kind, false, 4, "s", rng);
        auto disc = DiscreteCell::make(g, 16, 16, c_cell, kind, false, "d", rng);

        // copy preproc + chosen-op parameters from the supernet instance
        auto copy_state = [](auto& src, auto& dst) {
            std::vector<NamedTensorRef> a, b;
            src.collect_state(a);
            dst.collect_state(b);
            REQUIRE(a.size() == b.size());
            for (size_t i = 0; i < a.size(); ++i) *b[i].values = *a[i].values;
        };
        copy_state(super.pre0, disc.pre0);
        copy_state(super.pre1, disc.pre1);
        const auto& spec = g.cells(kind);
        for (int j = 0; j < 4; ++j)
            for (int e = 0; e < 2; ++e) {
                const auto& edge = spec[j].edges[e];
                auto& sop = super.edges[CellTemplate::edge_index(j, edge.pred)]
                                .ops[static_cast<int>(edge.op)];
                copy_state(*sop, *disc.nodes[j][e].op);
            }

        // chosen edges one-hot on the genotype op, all other edges on zero
        const int edges = CellTemplate::edge_count(4);
        std::vector<float> alphas(static_cast<size_t>(edges) * kNumOps, -50.0f);
        for (int eidx = 0; eidx < edges; ++eidx)
            alphas[eidx * kNumOps + static_cast<int>(OpKind::zero)] = 50.0f;
        for (int j = 0; j < 4; ++j)
            for (int e = 0; e < 2; ++e) {
                const auto& edge = spec[j].edges[e];
                const int eidx = CellTemplate::edge_index(j, edge.pred);
                for (int o = 0; o < kNumOps; ++o)
                    alphas[eidx * kNumOps + o] = o == static_cast<int>(edge.op) ? 50.0f : -50.0f;
            }

        auto p2 = Tensor::randn({1, 16, 6, 6}, rng);
        auto p1 = Tensor::randn({1, 16, 6, 6}, rng);
        auto alpha_t = Tensor::from_data({edges, kNumOps}, alphas);
        auto ys = super.forward(p2, p1, alpha_t, false);
        auto yd = disc.forward(p2, p1, false);
        REQUIRE(ys.shape() == yd.shape());
        for (int i = 0; i < ys.numel(); ++i)
            CHECK(std::abs(ys.data()[i] - yd.data()[i]) < 1e-4f);
    }
}

TEST_CASE("genotype format round-trips") {
    auto g = parse_genotype_text(kToyGenotype);
    CHECK(g.n_intermediate == 4);
    CHECK(format_genotype(g) == kToyGenotype);
}

TEST_CASE("genotype parser rejections") {
    CHECK_THROWS_AS(parse_genotype_text("nonsense"), DataError);
    // zero op
    std::string z = kToyGenotype;
    z.replace(z.find("sep_conv_3(0)"), 13, "zero(0)");
    CHECK_THROWS_AS(parse_genotype_text(z), DataError);
    // duplicate section
    std::string d = kToyGenotype;
    d.replace(d.find("reduce:"), 7, "normal:");
    CHECK_THROWS_AS(parse_genotype_text(d), DataError);
    // out-of-range predecessor
    std::string r = kToyGenotype;
    r.replace(r.find("sep_conv_5(1)"), 13, "sep_conv_5(4)");
    CHECK_THROWS_AS(parse_genotype_text(r), DataError);
    // missing section
    std::string m = kToyGenotype;
    m = m.substr(0, m.find("reduce:"));
    CHECK_THROWS_AS(parse_genotype_text(m), DataError);
}

TEST_CASE("mixed edge weights always form a probability vector") {
    Rng rng(11);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<float> a(kNumOps);
        for (auto& v : a) v = rng.uniform(-10.0f, 10.0f);
        auto w = softmax(Tensor::from_data({kNumOps}, a));
        double total = 0.0;
        for (float x : w.data()) {
            CHECK(x > 0.0f);
            total += x;
        }
        CHECK(std::abs(total - 1.0) < 1e-6);
    }
}
