#include "pocketnet/search_space.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <sstream>

#include "pocketnet/errors.hpp"

namespace pocketnet {

const std::array<OpKind, kNumOps> kAllOps = {
    OpKind::sep_conv_3, OpKind::sep_conv_5, OpKind::sep_conv_7, OpKind::conv_1x1,
    OpKind::max_pool_3, OpKind::avg_pool_3, OpKind::identity,   OpKind::zero,
};

std::string_view op_name(OpKind kind) {
    switch (kind) {
        case OpKind::sep_conv_3: return "sep_conv_3";
        case OpKind::sep_conv_5: return "sep_conv_5";
        case OpKind::sep_conv_7: return "sep_conv_7";
        case OpKind::conv_1x1: return "conv_1x1";
        case OpKind::max_pool_3: return "max_pool_3";
        case OpKind::avg_pool_3: return "avg_pool_3";
        case OpKind::identity: return "identity";
        case OpKind::zero: return "zero";
    }
    return "?";
}

std::optional<OpKind> op_from_name(std::string_view name) {
    for (OpKind k : kAllOps)
        if (op_name(k) == name) return k;
    return std::nullopt;
}

int CellTemplate::edge_count(int n_intermediate) {
    // node j has j+2 predecessors
    return n_intermediate * (n_intermediate + 3) / 2;
}

int CellTemplate::edge_index(int node, int pred) {
    return node * (node + 3) / 2 + pred;
}

// ---------------------------------------------------------------------------
// Candidate operations
// ---------------------------------------------------------------------------

namespace {

int strided_extent(int h, int stride) { return (h - 1) / stride + 1; }

class SepConvOp final : public CellOp {
public:
    SepConvOp(int k, int channels, int stride, const std::string& name, Rng& rng)
        : CellOp(k == 3 ? OpKind::sep_conv_3 : k == 5 ? OpKind::sep_conv_5 : OpKind::sep_conv_7),
          act_(PReLULayer::make(channels, name + ".prelu")),
          dw_(Conv2dLayer::make(channels, channels, k, stride, (k - 1) / 2, channels,
                                name + ".dw", rng)),
          pw_(Conv2dLayer::make(channels, channels, 1, 1, 0, 1, name + ".pw", rng)),
          bn_(BatchNorm2dLayer::make(channels, name + ".bn")) {}

    Tensor forward(const Tensor& x, bool training) override {
        return bn_.forward(pw_.forward(dw_.forward(act_.forward(x))), training);
    }
    void collect_params(std::vector<ParamPtr>& out) const override {
        act_.collect_params(out);
        dw_.collect_params(out);
        pw_.collect_params(out);
        bn_.collect_params(out);
    }
    void collect_state(std::vector<NamedTensorRef>& out) override {
        act_.collect_state(out);
        dw_.collect_state(out);
        pw_.collect_state(out);
        bn_.collect_state(out);
    }

private:
    PReLULayer act_;
    Conv2dLayer dw_, pw_;
    BatchNorm2dLayer bn_;
};

class Conv1x1Op final : public CellOp {
public:
    Conv1x1Op(int channels, int stride, const std::string& name, Rng& rng)
        : CellOp(OpKind::conv_1x1),
          act_(PReLULayer::make(channels, name + ".prelu")),
          conv_(Conv2dLayer::make(channels, channels, 1, stride, 0, 1, name + ".conv", rng)),
          bn_(BatchNorm2dLayer::make(channels, name + ".bn")) {}

    Tensor forward(const Tensor& x, bool training) override {
        return bn_.forward(conv_.forward(act_.forward(x)), training);
    }
    void collect_params(std::vector<ParamPtr>& out) const override {
        act_.collect_params(out);
        conv_.collect_params(out);
        bn_.collect_params(out);
    }
    void collect_state(std::vector<NamedTensorRef>& out) override {
        act_.collect_state(out);
        conv_.collect_state(out);
        bn_.collect_state(out);
    }

private:
    PReLULayer act_;
    Conv2dLayer conv_;
    BatchNorm2dLayer bn_;
};

class PoolOp final : public CellOp {
public:
    PoolOp(OpKind kind, int channels, int stride, const std::string& name)
        : CellOp(kind),
          pool_kind_(kind == OpKind::max_pool_3 ? PoolKind::max : PoolKind::avg),
          stride_(stride),
          bn_(BatchNorm2dLayer::make(channels, name + ".bn")) {}

    Tensor forward(const Tensor& x, bool training) override {
        return bn_.forward(pool2d(x, pool_kind_, 3, stride_, 1), training);
    }
    void collect_params(std::vector<ParamPtr>& out) const override { bn_.collect_params(out); }
    void collect_state(std::vector<NamedTensorRef>& out) override { bn_.collect_state(out); }

private:
    PoolKind pool_kind_;
    int stride_;
    BatchNorm2dLayer bn_;
};

class IdentityOp final : public CellOp {
public:
    IdentityOp() : CellOp(OpKind::identity) {}
    Tensor forward(const Tensor& x, bool) override { return x; }
    void collect_params(std::vector<ParamPtr>&) const override {}
    void collect_state(std::vector<NamedTensorRef>&) override {}
};

// identity with stride 2 substitutes a strided 1x1 conv + BN
class StridedIdentityOp final : public CellOp {
public:
    StridedIdentityOp(int channels, const std::string& name, Rng& rng)
        : CellOp(OpKind::identity),
          conv_(Conv2dLayer::make(channels, channels, 1, 2, 0, 1, name + ".conv", rng)),
          bn_(BatchNorm2dLayer::make(channels, name + ".bn")) {}

    Tensor forward(const Tensor& x, bool training) override {
        return bn_.forward(conv_.forward(x), training);
    }
    void collect_params(std::vector<ParamPtr>& out) const override {
        conv_.collect_params(out);
        bn_.collect_params(out);
    }
    void collect_state(std::vector<NamedTensorRef>& out) override {
        conv_.collect_state(out);
        bn_.collect_state(out);
    }

private:
    Conv2dLayer conv_;
    BatchNorm2dLayer bn_;
};

class ZeroOp final : public CellOp {
public:
    explicit ZeroOp(int stride) : CellOp(OpKind::zero), stride_(stride) {}
    Tensor forward(const Tensor& x, bool) override {
        return Tensor::zeros({x.dim(0), x.dim(1), strided_extent(x.dim(2), stride_),
                              strided_extent(x.dim(3), stride_)});
    }
    void collect_params(std::vector<ParamPtr>&) const override {}
    void collect_state(std::vector<NamedTensorRef>&) override {}

private:
    int stride_;
};

}  // namespace

std::unique_ptr<CellOp> make_op(OpKind kind, int channels, int stride,
                                const std::string& name, Rng& rng) {
    if (stride != 1 && stride != 2)
        throw UsageError("candidate ops support stride 1 or 2, got " + std::to_string(stride));
    switch (kind) {
        case OpKind::sep_conv_3: return std::make_unique<SepConvOp>(3, channels, stride, name, rng);
        case OpKind::sep_conv_5: return std::make_unique<SepConvOp>(5, channels, stride, name, rng);
        case OpKind::sep_conv_7: return std::make_unique<SepConvOp>(7, channels, stride, name, rng);
        case OpKind::conv_1x1: return std::make_unique<Conv1x1Op>(channels, stride, name, rng);
        case OpKind::max_pool_3:
        case OpKind::avg_pool_3: return std::make_unique<PoolOp>(kind, channels, stride, name);
        case OpKind::identity:
            if (stride == 1) return std::make_unique<IdentityOp>();
            return std::make_unique<StridedIdentityOp>(channels, name, rng);
        case OpKind::zero: return std::make_unique<ZeroOp>(stride);
    }
    throw UsageError("unknown op kind");
}

long op_param_count(OpKind kind, int channels, int stride) {
    const long c = channels;
    switch (kind) {
        case OpKind::sep_conv_3: return c + c * 9 + c * c + 2 * c;
        case OpKind::sep_conv_5: return c + c * 25 + c * c + 2 * c;
        case OpKind::sep_conv_7: return c + c * 49 + c * c + 2 * c;
        case OpKind::conv_1x1: return c + c * c + 2 * c;
        case OpKind::max_pool_3:
        case OpKind::avg_pool_3: return 2 * c;
        case OpKind::identity: return stride == 1 ? 0 : c * c + 2 * c;
        case OpKind::zero: return 0;
    }
    return 0;
}

long op_macs(OpKind kind, int channels, int stride, int h_in, int w_in) {
    const long c = channels;
    const long in_px = static_cast<long>(h_in) * w_in;
    const long out_px = static_cast<long>(strided_extent(h_in, stride)) *
                        strided_extent(w_in, stride);
    auto sep = [&](long k2) { return c * in_px + c * k2 * out_px + c * c * out_px + c * out_px; };
    switch (kind) {
        case OpKind::sep_conv_3: return sep(9);
        case OpKind::sep_conv_5: return sep(25);
        case OpKind::sep_conv_7: return sep(49);
        case OpKind::conv_1x1: return c * in_px + c * c * out_px + c * out_px;
        case OpKind::max_pool_3:
        case OpKind::avg_pool_3: return c * out_px;  // BN only
        case OpKind::identity: return stride == 1 ? 0 : c * c * out_px + c * out_px;
        case OpKind::zero: return 0;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Alpha table
// ---------------------------------------------------------------------------

AlphaTable AlphaTable::init(int n_intermediate, float sigma, Rng& rng) {
    AlphaTable t;
    t.n_intermediate = n_intermediate;
    const int edges = CellTemplate::edge_count(n_intermediate);
    t.normal = make_param("alpha.normal", Tensor::randn({edges, kNumOps}, rng, sigma));
    t.reduce = make_param("alpha.reduce", Tensor::randn({edges, kNumOps}, rng, sigma));
    return t;
}

// ---------------------------------------------------------------------------
// Genotype text format
// ---------------------------------------------------------------------------

void validate_genotype(const Genotype& g) {
    if (g.n_intermediate < 1) throw DataError("genotype must have at least one node");
    for (CellKind kind : {CellKind::normal, CellKind::reduction}) {
        const auto& nodes = g.cells(kind);
        if (static_cast<int>(nodes.size()) != g.n_intermediate)
            throw DataError("genotype section has " + std::to_string(nodes.size()) +
                            " nodes, expected " + std::to_string(g.n_intermediate));
        for (size_t j = 0; j < nodes.size(); ++j)
            for (const auto& e : nodes[j].edges) {
                if (e.op == OpKind::zero)
                    throw DataError("genotype may not contain the zero op");
                if (e.pred < 0 || e.pred >= static_cast<int>(j) + 2)
                    throw DataError("genotype predecessor " + std::to_string(e.pred) +
                                    " out of range for node " + std::to_string(j + 2));
            }
    }
}

std::string format_genotype(const Genotype& g) {
    std::ostringstream os;
    os << "genotype v1\n";
    os << "nodes " << g.n_intermediate << "\n";
    for (CellKind kind : {CellKind::normal, CellKind::reduction}) {
        os << (kind == CellKind::normal ? "normal:" : "reduce:") << "\n";
        const auto& nodes = g.cells(kind);
        for (size_t j = 0; j < nodes.size(); ++j) {
            os << "node" << (j + 2) << ": ";
            os << op_name(nodes[j].edges[0].op) << "(" << nodes[j].edges[0].pred << "), ";
            os << op_name(nodes[j].edges[1].op) << "(" << nodes[j].edges[1].pred << ")\n";
        }
    }
    return os.str();
}

namespace {

std::string strip(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

Genotype::Edge parse_edge(const std::string& token, int node_j) {
    const size_t open = token.find('(');
    const size_t close = token.find(')');
    if (open == std::string::npos || close == std::string::npos || close < open)
        throw DataError("genotype: malformed edge '" + token + "'");
    const std::string name = strip(token.substr(0, open));
    const std::string idx = strip(token.substr(open + 1, close - open - 1));
    auto kind = op_from_name(name);
    if (!kind) throw DataError("genotype: unknown op tag '" + name + "'");
    if (*kind == OpKind::zero) throw DataError("genotype: zero op not allowed");
    int pred = 0;
    try {
        size_t pos = 0;
        pred = std::stoi(idx, &pos);
        if (pos != idx.size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
        throw DataError("genotype: bad predecessor index '" + idx + "'");
    }
    if (pred < 0 || pred >= node_j)
        throw DataError("genotype: predecessor " + std::to_string(pred) +
                        " out of range for node" + std::to_string(node_j));
    return {pred, *kind};
}

}  // namespace

Genotype parse_genotype(std::istream& in) {
    std::vector<std::string> lines;
    std::string raw;
    while (std::getline(in, raw)) {
        const std::string line = strip(raw);
        if (!line.empty()) lines.push_back(line);
    }
    size_t at = 0;
    auto next = [&]() -> const std::string& {
        if (at >= lines.size()) throw DataError("genotype: unexpected end of file");
        return lines[at++];
    };

    if (next() != "genotype v1") throw DataError("genotype: missing 'genotype v1' header");
    {
        const std::string& l = next();
        if (l.rfind("nodes ", 0) != 0) throw DataError("genotype: expected 'nodes <n>'");
    }
    Genotype g;
    g.n_intermediate = std::stoi(lines[at - 1].substr(6));
    if (g.n_intermediate < 1 || g.n_intermediate > 16)
        throw DataError("genotype: node count out of range");

    bool saw_normal = false, saw_reduce = false;
    while (at < lines.size()) {
        const std::string section = next();
        bool is_normal;
        if (section == "normal:") {
            if (saw_normal) throw DataError("genotype: duplicate 'normal:' section");
            saw_normal = true;
            is_normal = true;
        } else if (section == "reduce:") {
            if (saw_reduce) throw DataError("genotype: duplicate 'reduce:' section");
            saw_reduce = true;
            is_normal = false;
        } else {
            throw DataError("genotype: unexpected line '" + section + "'");
        }
        auto& nodes = is_normal ? g.normal : g.reduce;
        for (int j = 0; j < g.n_intermediate; ++j) {
            const std::string& l = next();
            const std::string expect = "node" + std::to_string(j + 2) + ":";
            if (l.rfind(expect, 0) != 0)
                throw DataError("genotype: expected '" + expect + " ...', got '" + l + "'");
            const std::string rest = l.substr(expect.size());
            const size_t comma = rest.find(',');
            if (comma == std::string::npos)
                throw DataError("genotype: node line needs exactly two edges: '" + l + "'");
            const std::string second = rest.substr(comma + 1);
            if (second.find(',') != std::string::npos)
                throw DataError("genotype: node line needs exactly two edges: '" + l + "'");
            Genotype::NodeSpec spec;
            spec.edges[0] = parse_edge(strip(rest.substr(0, comma)), j + 2);
            spec.edges[1] = parse_edge(strip(second), j + 2);
            nodes.push_back(spec);
        }
    }
    if (!saw_normal || !saw_reduce)
        throw DataError("genotype: both 'normal:' and 'reduce:' sections are required");
    validate_genotype(g);
    return g;
}

Genotype parse_genotype_text(const std::string& text) {
    std::istringstream is(text);
    return parse_genotype(is);
}

Genotype parse_genotype_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open genotype file: " + path);
    return parse_genotype(f);
}

// ---------------------------------------------------------------------------
// Mixed op and cells
// ---------------------------------------------------------------------------

MixedOp MixedOp::make(int channels, int stride, const std::string& name, Rng& rng) {
    MixedOp m;
    m.ops.reserve(kNumOps);
    for (OpKind k : kAllOps)
        m.ops.push_back(make_op(k, channels, stride, name + "." + std::string(op_name(k)), rng));
    return m;
}

Tensor MixedOp::forward(const Tensor& alpha_row, const Tensor& x, bool training) {
    if (alpha_row.rank() != 1 || alpha_row.numel() != kNumOps)
        throw DataError("mixed op expects " + std::to_string(kNumOps) + " alphas");
    for (float a : alpha_row.data())
        if (!std::isfinite(a)) throw NumericError("mixed op alpha is not finite");
    Tensor weights = softmax(alpha_row);
    std::vector<Tensor> outs;
    outs.reserve(ops.size());
    for (auto& op : ops) outs.push_back(op->forward(x, training));
    return weighted_sum(outs, weights);
}

void MixedOp::collect_params(std::vector<ParamPtr>& out) const {
    for (const auto& op : ops) op->collect_params(out);
}

void MixedOp::collect_state(std::vector<NamedTensorRef>& out) {
    for (auto& op : ops) op->collect_state(out);
}

Tensor mixed_forward(const Tensor& alpha_row, const Tensor& x, MixedOp& op, bool training) {
    return op.forward(alpha_row, x, training);
}

Preproc Preproc::make(int in_c, int out_c, int stride, const std::string& name, Rng& rng) {
    Preproc p;
    p.conv = Conv2dLayer::make(in_c, out_c, 1, stride, 0, 1, name + ".conv", rng);
    p.bn = BatchNorm2dLayer::make(out_c, name + ".bn");
    return p;
}

Tensor Preproc::forward(const Tensor& x, bool training) {
    return bn.forward(conv.forward(x), training);
}

void Preproc::collect_params(std::vector<ParamPtr>& out) const {
    conv.collect_params(out);
    bn.collect_params(out);
}

void Preproc::collect_state(std::vector<NamedTensorRef>& out) {
    conv.collect_state(out);
    bn.collect_state(out);
}

namespace {

int node_width_for(int c_cell, int n_intermediate) {
    if (c_cell % n_intermediate != 0)
        throw DataError("cell channels " + std::to_string(c_cell) +
                        " not divisible by node count " + std::to_string(n_intermediate));
    return c_cell / n_intermediate;
}

void check_preproc_spatial(const Tensor& s0, const Tensor& s1) {
    if (s0.dim(2) != s1.dim(2) || s0.dim(3) != s1.dim(3))
        throw DataError("cell inputs disagree spatially after preprocessing: " +
                        std::to_string(s0.dim(2)) + "x" + std::to_string(s0.dim(3)) + " vs " +
                        std::to_string(s1.dim(2)) + "x" + std::to_string(s1.dim(3)));
}

}  // namespace

SuperCell SuperCell::make(int c_prev2, int c_prev1, int c_cell, CellKind kind,
                          bool reduction_prev, int n_intermediate, const std::string& name,
                          Rng& rng) {
    SuperCell cell;
    cell.tmpl.n_intermediate = n_intermediate;
    cell.tmpl.kind = kind;
    cell.reduction_prev = reduction_prev;
    cell.node_width = node_width_for(c_cell, n_intermediate);
    cell.pre0 = Preproc::make(c_prev2, cell.node_width, reduction_prev ? 2 : 1,
                              name + ".pre0", rng);
    cell.pre1 = Preproc::make(c_prev1, cell.node_width, 1, name + ".pre1", rng);
    for (int j = 0; j < n_intermediate; ++j)
        for (int pred = 0; pred < j + 2; ++pred) {
            const int stride = (kind == CellKind::reduction && pred < 2) ? 2 : 1;
            cell.edges.push_back(MixedOp::make(
                cell.node_width, stride,
                name + ".edge" + std::to_string(CellTemplate::edge_index(j, pred)), rng));
        }
    return cell;
}

Tensor SuperCell::forward(const Tensor& prev2, const Tensor& prev1, const Tensor& alpha_table,
                          bool training) {
    std::vector<Tensor> states;
    states.push_back(pre0.forward(prev2, training));
    states.push_back(pre1.forward(prev1, training));
    check_preproc_spatial(states[0], states[1]);
    for (int j = 0; j < tmpl.n_intermediate; ++j) {
        Tensor acc;
        for (int pred = 0; pred < j + 2; ++pred) {
            Tensor a = row(alpha_table, CellTemplate::edge_index(j, pred));
            Tensor e = edges[CellTemplate::edge_index(j, pred)].forward(a, states[pred], training);
            acc = acc.defined() ? add(acc, e) : e;
        }
        states.push_back(acc);
    }
    std::vector<Tensor> inter(states.begin() + 2, states.end());
    return concat_channels(inter);
}

void SuperCell::collect_params(std::vector<ParamPtr>& out) const {
    pre0.collect_params(out);
    pre1.collect_params(out);
    for (const auto& e : edges) e.collect_params(out);
}

void SuperCell::collect_state(std::vector<NamedTensorRef>& out) {
    pre0.collect_state(out);
    pre1.collect_state(out);
    for (auto& e : edges) e.collect_state(out);
}

DiscreteCell DiscreteCell::make(const Genotype& g, int c_prev2, int c_prev1, int c_cell,
                                CellKind kind, bool reduction_prev, const std::string& name,
                                Rng& rng) {
    validate_genotype(g);
    DiscreteCell cell;
    cell.tmpl.n_intermediate = g.n_intermediate;
    cell.tmpl.kind = kind;
    cell.reduction_prev = reduction_prev;
    cell.node_width = node_width_for(c_cell, g.n_intermediate);
    cell.pre0 = Preproc::make(c_prev2, cell.node_width, reduction_prev ? 2 : 1,
                              name + ".pre0", rng);
    cell.pre1 = Preproc::make(c_prev1, cell.node_width, 1, name + ".pre1", rng);
    const auto& nodes = g.cells(kind);
    for (int j = 0; j < g.n_intermediate; ++j) {
        std::array<EdgeOp, 2> pair;
        for (int e = 0; e < 2; ++e) {
            const auto& edge = nodes[j].edges[e];
            const int stride = (kind == CellKind::reduction && edge.pred < 2) ? 2 : 1;
            pair[e].pred = edge.pred;
            pair[e].op = make_op(edge.op, cell.node_width, stride,
                                 name + ".node" + std::to_string(j + 2) + ".e" +
                                     std::to_string(e) + "." + std::string(op_name(edge.op)),
                                 rng);
        }
        cell.nodes.push_back(std::move(pair));
    }
    return cell;
}

Tensor DiscreteCell::forward(const Tensor& prev2, const Tensor& prev1, bool training) {
    std::vector<Tensor> states;
    states.push_back(pre0.forward(prev2, training));
    states.push_back(pre1.forward(prev1, training));
    check_preproc_spatial(states[0], states[1]);
    for (auto& node : nodes) {
        Tensor a = node[0].op->forward(states[node[0].pred], training);
        Tensor b = node[1].op->forward(states[node[1].pred], training);
        states.push_back(add(a, b));
    }
    std::vector<Tensor> inter(states.begin() + 2, states.end());
    return concat_channels(inter);
}

void DiscreteCell::collect_params(std::vector<ParamPtr>& out) const {
    pre0.collect_params(out);
    pre1.collect_params(out);
    for (const auto& node : nodes)
        for (const auto& e : node) e.op->collect_params(out);
}

void DiscreteCell::collect_state(std::vector<NamedTensorRef>& out) {
    pre0.collect_state(out);
    pre1.collect_state(out);
    for (auto& node : nodes)
        for (auto& e : node) e.op->collect_state(out);
}

}  // namespace pocketnet
