#pragma once

// The candidate-operation catalog, the softmax-relaxed mixed edge, and the
// cell DAG in both its continuous (supernet) and discrete (genotype) forms.
//
// Cell layout: nodes 0 and 1 are the outputs of cells k-2 and k-1, each
// preprocessed to the per-node width by a 1x1 conv + BN (strided when the
// k-2 output predates a reduction). Intermediate node j sums its incoming
// edges; the cell output concatenates the intermediate nodes only. Per-node
// width is cell_channels / n_intermediate so normal cells preserve their
// channel count and reduction cells double it.

#include <array>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pocketnet/nn.hpp"
#include "pocketnet/tensor.hpp"

namespace pocketnet {

enum class OpKind : int {
    sep_conv_3 = 0,
    sep_conv_5 = 1,
    sep_conv_7 = 2,
    conv_1x1 = 3,
    max_pool_3 = 4,
    avg_pool_3 = 5,
    identity = 6,
    zero = 7,
};
inline constexpr int kNumOps = 8;
extern const std::array<OpKind, kNumOps> kAllOps;

std::string_view op_name(OpKind kind);
std::optional<OpKind> op_from_name(std::string_view name);

enum class CellKind { normal, reduction };

struct CellTemplate {
    int n_intermediate = 4;
    CellKind kind = CellKind::normal;

    // flattened edge table: for intermediate node j (0-based), predecessors
    // are 0 .. j+1 (0 and 1 being the cell inputs)
    static int edge_count(int n_intermediate);
    static int edge_index(int node, int pred);
    int edge_count() const { return edge_count(n_intermediate); }
};

// A single candidate operation instance on an edge.
class CellOp {
public:
    virtual ~CellOp() = default;
    virtual Tensor forward(const Tensor& x, bool training) = 0;
    virtual void collect_params(std::vector<ParamPtr>& out) const = 0;
    virtual void collect_state(std::vector<NamedTensorRef>& out) = 0;
    OpKind kind() const { return kind_; }

protected:
    explicit CellOp(OpKind kind) : kind_(kind) {}
    OpKind kind_;
};

// Candidate op at `channels` in/out width. stride is 1 or 2; stride 2 is only
// valid on reduction-cell edges that leave the input nodes.
std::unique_ptr<CellOp> make_op(OpKind kind, int channels, int stride,
                                const std::string& name, Rng& rng);

// Trainable-parameter census of one candidate op by its composition.
long op_param_count(OpKind kind, int channels, int stride);
// Multiply-accumulate census of one candidate op on an h_in x w_in map.
long op_macs(OpKind kind, int channels, int stride, int h_in, int w_in);

// Continuous architecture parameters: one row of kNumOps logits per edge,
// one table per cell kind, shared across all cells of that kind.
struct AlphaTable {
    int n_intermediate = 4;
    ParamPtr normal;  // [edge_count, kNumOps]
    ParamPtr reduce;

    static AlphaTable init(int n_intermediate, float sigma, Rng& rng);
    ParamPtr table(CellKind kind) const { return kind == CellKind::normal ? normal : reduce; }
    std::vector<ParamPtr> params() const { return {normal, reduce}; }
};

// Discrete cell description: per intermediate node, two (predecessor, op)
// choices; never the zero op.
struct Genotype {
    struct Edge {
        int pred = 0;
        OpKind op = OpKind::identity;
    };
    struct NodeSpec {
        std::array<Edge, 2> edges;
    };
    std::vector<NodeSpec> normal;
    std::vector<NodeSpec> reduce;
    int n_intermediate = 4;

    const std::vector<NodeSpec>& cells(CellKind kind) const {
        return kind == CellKind::normal ? normal : reduce;
    }
};

void validate_genotype(const Genotype& g);
std::string format_genotype(const Genotype& g);
Genotype parse_genotype(std::istream& in);
Genotype parse_genotype_text(const std::string& text);
Genotype parse_genotype_file(const std::string& path);

// All kNumOps candidates of one edge plus the Eq.-style softmax mixture.
struct MixedOp {
    std::vector<std::unique_ptr<CellOp>> ops;

    static MixedOp make(int channels, int stride, const std::string& name, Rng& rng);
    // output = sum_o softmax(alpha)_o * op_o(x)
    Tensor forward(const Tensor& alpha_row, const Tensor& x, bool training);
    void collect_params(std::vector<ParamPtr>& out) const;
    void collect_state(std::vector<NamedTensorRef>& out);
};

Tensor mixed_forward(const Tensor& alpha_row, const Tensor& x, MixedOp& op, bool training);

// 1x1 conv + BN input preprocessing (stride 2 when reducing the k-2 input).
struct Preproc {
    Conv2dLayer conv;
    BatchNorm2dLayer bn;

    static Preproc make(int in_c, int out_c, int stride, const std::string& name, Rng& rng);
    Tensor forward(const Tensor& x, bool training);
    void collect_params(std::vector<ParamPtr>& out) const;
    void collect_state(std::vector<NamedTensorRef>& out);
};

// Supernet cell: every intermediate node has a mixed edge from every
// predecessor.
struct SuperCell {
    CellTemplate tmpl;
    bool reduction_prev = false;
    int node_width = 0;
    Preproc pre0, pre1;
    std::vector<MixedOp> edges;  // indexed by CellTemplate::edge_index

    static SuperCell make(int c_prev2, int c_prev1, int c_cell, CellKind kind,
                          bool reduction_prev, int n_intermediate, const std::string& name,
                          Rng& rng);
    Tensor forward(const Tensor& prev2, const Tensor& prev1, const Tensor& alpha_table,
                   bool training);
    void collect_params(std::vector<ParamPtr>& out) const;
    void collect_state(std::vector<NamedTensorRef>& out);
};

// Discrete cell instantiated from a genotype.
struct DiscreteCell {
    CellTemplate tmpl;
    bool reduction_prev = false;
    int node_width = 0;
    Preproc pre0, pre1;
    struct EdgeOp {
        int pred = 0;
        std::unique_ptr<CellOp> op;
    };
    std::vector<std::array<EdgeOp, 2>> nodes;

    static DiscreteCell make(const Genotype& g, int c_prev2, int c_prev1, int c_cell,
                             CellKind kind, bool reduction_prev, const std::string& name,
                             Rng& rng);
    Tensor forward(const Tensor& prev2, const Tensor& prev1, bool training);
    void collect_params(std::vector<ParamPtr>& out) const;
    void collect_state(std::vector<NamedTensorRef>& out);
};

}  // namespace pocketnet
