#include "pocketnet/net_builder.hpp"

#include <sstream>

#include "pocketnet/errors.hpp"

namespace pocketnet {

VariantSpec VariantSpec::named(const std::string& name) {
    VariantSpec v;
    v.name = name;
    if (name == "S-128" || name == "S-256") {
        v.stem_channels = 64;
        v.n_normal_per_stage = {6, 5, 4};
    } else if (name == "M-128" || name == "M-256") {
        v.stem_channels = 128;
        v.n_normal_per_stage = {3, 2, 1};
    } else {
        throw UsageError("unknown variant '" + name +
                         "' (expected S-128, S-256, M-128, M-256)");
    }
    v.embedding_dim = name.ends_with("-256") ? 256 : 128;
    v.input_size = 112;
    return v;
}

void VariantSpec::validate() const {
    for (int n : n_normal_per_stage)
        if (n < 1) throw DataError("each stage needs at least one normal cell");
    if (embedding_dim < 1) throw DataError("embedding_dim must be >= 1");
    if (stem_channels < 4) throw DataError("stem_channels must be >= 4");
    if (input_size % 16 != 0)
        throw DataError("input_size must be divisible by 16 (stem + 3 reductions), got " +
                        std::to_string(input_size));
}

std::vector<CellPlanEntry> make_cell_plan(const VariantSpec& variant) {
    variant.validate();
    std::vector<CellPlanEntry> plan;
    int c_pp = variant.stem_channels, c_p = variant.stem_channels;
    int h_pp = variant.input_size / 2, h_p = variant.input_size / 2;
    bool red_prev = false;
    int stage = 0;
    auto push = [&](CellKind kind) {
        CellPlanEntry e;
        e.kind = kind;
        e.reduction_prev = red_prev;
        e.c_cell = kind == CellKind::reduction ? 2 * c_p : c_p;
        e.c_prev2 = c_pp;
        e.c_prev1 = c_p;
        e.h_in = e.w_in = h_p;
        e.h_prev2 = e.w_prev2 = h_pp;
        e.stage = stage;
        plan.push_back(e);
        const int h_out = kind == CellKind::reduction ? h_p / 2 : h_p;
        c_pp = c_p;
        c_p = e.c_cell;
        h_pp = h_p;
        h_p = h_out;
        red_prev = kind == CellKind::reduction;
    };
    for (int s = 0; s < 3; ++s) {
        for (int i = 0; i < variant.n_normal_per_stage[s]; ++i) push(CellKind::normal);
        ++stage;
        push(CellKind::reduction);
        ++stage;
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

PocketNet::PocketNet(const Genotype& genotype, const VariantSpec& variant, Rng& rng)
    : variant_(variant), genotype_(genotype) {
    validate_genotype(genotype);
    variant.validate();
    const auto plan = make_cell_plan(variant);

    stem_conv_ = Conv2dLayer::make(3, variant.stem_channels, 3, 2, 1, 1, "stem.conv", rng);
    stem_bn_ = BatchNorm2dLayer::make(variant.stem_channels, "stem.bn");

    for (size_t i = 0; i < plan.size(); ++i) {
        const auto& e = plan[i];
        cells_.push_back(DiscreteCell::make(genotype, e.c_prev2, e.c_prev1, e.c_cell, e.kind,
                                            e.reduction_prev, "cells." + std::to_string(i),
                                            rng));
    }

    const int c_last = plan.back().c_cell;
    const int head = variant.head_width();
    head_act1_ = PReLULayer::make(c_last, "head.prelu1");
    head_conv_ = Conv2dLayer::make(c_last, head, 1, 1, 0, 1, "head.conv", rng);
    head_bn_ = BatchNorm2dLayer::make(head, "head.bn");
    head_act2_ = PReLULayer::make(head, "head.prelu2");

    const int final_spatial = plan.back().h_in / 2;  // after the last reduction
    const int k = variant.gdc_kernel();
    if (k != final_spatial)
        throw DataError("gdc kernel " + std::to_string(k) +
                        " must equal the final spatial size, computed " +
                        std::to_string(final_spatial));
    gdc_conv_ = Conv2dLayer::make(head, head, k, 1, 0, head, "gdc.conv", rng);
    gdc_bn_ = BatchNorm2dLayer::make(head, "gdc.bn");

    emb_conv_ = Conv2dLayer::make(head, variant.embedding_dim, 1, 1, 0, 1, "embedding.conv", rng);
    emb_bn_ = BatchNorm2dLayer::make(variant.embedding_dim, "embedding.bn");
}

Tensor PocketNet::forward(const Tensor& x, bool training) {
    if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != variant_.input_size ||
        x.dim(3) != variant_.input_size)
        throw DataError("network expects Nx3x" + std::to_string(variant_.input_size) + "x" +
                        std::to_string(variant_.input_size) + " input");
    Tensor stem = stem_bn_.forward(stem_conv_.forward(x), training);
    Tensor prev2 = stem, prev1 = stem;
    for (auto& cell : cells_) {
        Tensor out = cell.forward(prev2, prev1, training);
        prev2 = prev1;
        prev1 = out;
    }
    Tensor h = head_act1_.forward(prev1);
    h = head_bn_.forward(head_conv_.forward(h), training);
    h = head_act2_.forward(h);
    h = gdc_bn_.forward(gdc_conv_.forward(h), training);
    h = emb_bn_.forward(emb_conv_.forward(h), training);
    return reshape(h, {h.dim(0), variant_.embedding_dim});
}

std::vector<ParamPtr> PocketNet::parameters() const {
    std::vector<ParamPtr> out;
    stem_conv_.collect_params(out);
    stem_bn_.collect_params(out);
    for (const auto& c : cells_) c.collect_params(out);
    head_act1_.collect_params(out);
    head_conv_.collect_params(out);
    head_bn_.collect_params(out);
    head_act2_.collect_params(out);
    gdc_conv_.collect_params(out);
    gdc_bn_.collect_params(out);
    emb_conv_.collect_params(out);
    emb_bn_.collect_params(out);
    return out;
}

std::vector<NamedTensorRef> PocketNet::state() {
    std::vector<NamedTensorRef> out;
    stem_conv_.collect_state(out);
    stem_bn_.collect_state(out);
    for (auto& c : cells_) c.collect_state(out);
    head_act1_.collect_state(out);
    head_conv_.collect_state(out);
    head_bn_.collect_state(out);
    head_act2_.collect_state(out);
    gdc_conv_.collect_state(out);
    gdc_bn_.collect_state(out);
    emb_conv_.collect_state(out);
    emb_bn_.collect_state(out);
    return out;
}

// ---------------------------------------------------------------------------
// Analytic census
// ---------------------------------------------------------------------------

namespace {

struct CellCensus {
    long params = 0;
    long macs = 0;
};

CellCensus census_cell(const Genotype& g, const CellPlanEntry& e) {
    CellCensus c;
    const int w = e.c_cell / g.n_intermediate;
    // preprocessing: 1x1 conv + BN per input (params do not depend on stride)
    c.params += static_cast<long>(e.c_prev2) * w + 2L * w;
    c.params += static_cast<long>(e.c_prev1) * w + 2L * w;
    const long px = static_cast<long>(e.h_in) * e.w_in;
    c.macs += (static_cast<long>(e.c_prev2) + 1) * w * px;  // conv + BN
    c.macs += (static_cast<long>(e.c_prev1) + 1) * w * px;

    const bool reduction = e.kind == CellKind::reduction;
    for (const auto& node : g.cells(reduction ? CellKind::reduction : CellKind::normal))
        for (const auto& edge : node.edges) {
            const int stride = (reduction && edge.pred < 2) ? 2 : 1;
            c.params += op_param_count(edge.op, w, stride);
            // edges leaving intermediate nodes of a reduction cell already
            // run at the halved resolution
            const bool halved = reduction && edge.pred >= 2;
            const int h = halved ? e.h_in / 2 : e.h_in;
            const int wd = halved ? e.w_in / 2 : e.w_in;
            c.macs += op_macs(edge.op, w, stride, h, wd);
        }
    return c;
}

std::string cell_stage_label(int stage_index, const VariantSpec& v) {
    // stage indices: 0,2,4 are normal stages; 1,3,5 are reductions
    if (stage_index % 2 == 0) {
        const int s = stage_index / 2;
        int first = 1;
        for (int i = 0; i < s; ++i) first += v.n_normal_per_stage[i];
        const int last = first + v.n_normal_per_stage[s] - 1;
        return "normal cell " + std::to_string(first) + "-" + std::to_string(last);
    }
    return "reduction cell " + std::to_string(stage_index / 2 + 1);
}

}  // namespace

CountReport count_report(const Genotype& genotype, const VariantSpec& variant) {
    validate_genotype(genotype);
    variant.validate();
    CountReport rep;
    const auto plan = make_cell_plan(variant);
    const int s2 = variant.input_size / 2;

    {
        StageRow stem;
        stem.op = "conv2d(k=3,s=2,p=1), bn";
        stem.out_shape = {variant.stem_channels, s2, s2};
        const long px = static_cast<long>(s2) * s2;
        stem.params = 29L * variant.stem_channels;  // 27C conv + 2C bn
        stem.flops = 2 * ((27L + 1L) * variant.stem_channels * px);
        rep.rows.push_back(stem);
    }

    int at = 0;
    for (int stage = 0; stage < 6; ++stage) {
        StageRow row;
        row.op = cell_stage_label(stage, variant);
        row.repeat = 0;
        while (at < static_cast<int>(plan.size()) && plan[at].stage == stage) {
            const auto census = census_cell(genotype, plan[at]);
            row.params += census.params;
            row.flops += 2 * census.macs;
            const auto& e = plan[at];
            const int h_out = e.kind == CellKind::reduction ? e.h_in / 2 : e.h_in;
            row.out_shape = {e.c_cell, h_out, h_out};
            ++row.repeat;
            ++at;
        }
        rep.rows.push_back(row);
    }

    const int c_last = plan.back().c_cell;
    const int head = variant.head_width();
    const int fs = variant.gdc_kernel();
    const long fpx = static_cast<long>(fs) * fs;
    {
        StageRow r;
        r.op = "prelu, conv2d(k=1), bn, prelu";
        r.out_shape = {head, fs, fs};
        r.params = c_last + static_cast<long>(c_last) * head + 2L * head + head;
        r.flops = 2 * (c_last * fpx + static_cast<long>(c_last) * head * fpx + head * fpx +
                       head * fpx);
        rep.rows.push_back(r);
    }
    {
        StageRow r;
        r.op = "conv2d(k=" + std::to_string(fs) + ",g=" + std::to_string(head) + "), bn";
        r.out_shape = {head, 1, 1};
        r.params = static_cast<long>(head) * fs * fs + 2L * head;
        r.flops = 2 * (static_cast<long>(head) * fs * fs + head);
        rep.rows.push_back(r);
    }
    {
        StageRow r;
        r.op = "conv2d(k=1), bn";
        r.out_shape = {variant.embedding_dim, 1, 1};
        r.params = static_cast<long>(head) * variant.embedding_dim + 2L * variant.embedding_dim;
        r.flops = 2 * (static_cast<long>(head) * variant.embedding_dim + variant.embedding_dim);
        rep.rows.push_back(r);
    }

    for (const auto& r : rep.rows) {
        rep.total_params += r.params;
        rep.total_flops += r.flops;
    }
    return rep;
}

long count_params(const PocketNet& net) {
    return count_report(net.genotype(), net.variant()).total_params;
}

long count_flops(const PocketNet& net) {
    return count_report(net.genotype(), net.variant()).total_flops;
}

std::string summarize(const CountReport& report) {
    std::ostringstream os;
    os << "operation                        output size        r   params\n";
    for (const auto& r : report.rows) {
        std::ostringstream shape;
        shape << "[" << r.out_shape[0] << " x " << r.out_shape[1] << " x " << r.out_shape[2]
              << "]";
        os << r.op;
        for (size_t i = r.op.size(); i < 33; ++i) os << ' ';
        os << shape.str();
        for (size_t i = shape.str().size(); i < 19; ++i) os << ' ';
        os << r.repeat << "   " << r.params << "\n";
    }
    os << "total params: " << report.total_params << "\n";
    os << "total flops: " << report.total_flops << " (" << report.flop_convention << ")\n";
    return os.str();
}

std::string report_csv(const CountReport& report) {
    std::ostringstream os;
    os << "stage,params,flops\n";
    for (const auto& r : report.rows) os << r.op << "," << r.params << "," << r.flops << "\n";
    os << "total," << report.total_params << "," << report.total_flops << "\n";
    return os.str();
}

}  // namespace pocketnet
