#pragma once

// Assembles a complete PocketNet from a genotype and a variant descriptor:
// stem (3x3 stride-2 conv + BN), three normal-cell stages with reduction
// cells after each stage, the 512-wide head, a global depthwise conv whose
// kernel spans the final feature map, and the embedding projection.
// Also provides the analytic parameter / FLOP census and a table-style
// summary, computed from the plan rather than from parameter buffers.

#include <array>
#include <string>
#include <vector>

#include "pocketnet/nn.hpp"
#include "pocketnet/search_space.hpp"

namespace pocketnet {

struct VariantSpec {
    std::string name = "custom";
    int stem_channels = 64;
    std::array<int, 3> n_normal_per_stage{6, 5, 4};
    int embedding_dim = 128;
    int input_size = 112;

    // S-128, S-256, M-128, M-256
    static VariantSpec named(const std::string& name);
    void validate() const;
    int head_width() const { return 512; }
    int gdc_kernel() const { return input_size / 16; }
};

struct CellPlanEntry {
    CellKind kind = CellKind::normal;
    bool reduction_prev = false;
    int c_cell = 0;
    int c_prev2 = 0, c_prev1 = 0;
    int h_in = 0, w_in = 0;        // resolution the cell operates at
    int h_prev2 = 0, w_prev2 = 0;  // resolution of the k-2 input
    int stage = 0;                 // 0..5: three normal stages interleaved with reductions
};

// The stem/cells/head layout shared by the builder and the census.
std::vector<CellPlanEntry> make_cell_plan(const VariantSpec& variant);

class PocketNet {
public:
    PocketNet(const Genotype& genotype, const VariantSpec& variant, Rng& rng);

    // N x 3 x S x S -> N x embedding_dim
    Tensor forward(const Tensor& x, bool training);

    std::vector<ParamPtr> parameters() const;
    std::vector<NamedTensorRef> state();

    const VariantSpec& variant() const { return variant_; }
    const Genotype& genotype() const { return genotype_; }

private:
    VariantSpec variant_;
    Genotype genotype_;
    Conv2dLayer stem_conv_;
    BatchNorm2dLayer stem_bn_;
    std::vector<DiscreteCell> cells_;
    PReLULayer head_act1_;
    Conv2dLayer head_conv_;
    BatchNorm2dLayer head_bn_;
    PReLULayer head_act2_;
    Conv2dLayer gdc_conv_;
    BatchNorm2dLayer gdc_bn_;
    Conv2dLayer emb_conv_;
    BatchNorm2dLayer emb_bn_;
};

struct StageRow {
    std::string op;
    std::array<int, 3> out_shape{0, 0, 0};  // C, H, W
    int repeat = 1;
    long params = 0;
    long flops = 0;  // 2 x MAC
};

struct CountReport {
    std::vector<StageRow> rows;
    long total_params = 0;
    long total_flops = 0;
    std::string flop_convention = "2*MAC";
};

// Analytic census from the plan; independent of any parameter buffers.
CountReport count_report(const Genotype& genotype, const VariantSpec& variant);
long count_params(const PocketNet& net);
long count_flops(const PocketNet& net);

// Table-style rendering: operation, output size, repeat count, parameters.
std::string summarize(const CountReport& report);
// CSV lines `stage,params,flops`.
std::string report_csv(const CountReport& report);

}  // namespace pocketnet
