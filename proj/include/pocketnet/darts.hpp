#pragma once

// Bi-level architecture search: alternating first-order updates of network
// weights (momentum SGD on the train half) and architecture parameters
// (Adam on the validation half), cosine-annealed weight learning rate, and
// discrete genotype derivation from the learned alphas.

#include <string>
#include <utility>
#include <vector>

#include "pocketnet/io.hpp"
#include "pocketnet/search_space.hpp"

namespace pocketnet {

struct SearchConfig {
    int epochs = 50;
    int batch_size = 128;
    float w_lr_max = 0.1f;
    float w_lr_min = 0.004f;
    float w_momentum = 0.9f;
    float w_weight_decay = 3e-4f;
    float alpha_lr = 0.0012f;
    std::pair<float, float> alpha_betas{0.5f, 0.999f};
    float alpha_weight_decay = 1e-3f;
    int init_channels = 64;
    int n_cells = 8;
    int n_intermediate = 4;
    float alpha_init_sigma = 1e-3f;
    uint32_t seed = 0;

    void validate() const;
};

struct SplitDataset {
    const Dataset* base = nullptr;
    std::vector<int> train_half;
    std::vector<int> val_half;

    // deterministic seeded shuffle, then an equal split
    static SplitDataset split(const Dataset& ds, uint32_t seed);
};

// lr_min + 0.5*(lr_max - lr_min)*(1 + cos(pi*t/T))
float cosine_lr(int t, int total, float lr_max, float lr_min);

// The supernet used during search: stem conv + BN, n_cells supercells with
// reductions at 1/3 and 2/3 depth, global average pooling and a linear
// classification head.
class SuperNet {
public:
    SuperNet(const SearchConfig& config, int n_classes, int input_size, Rng& rng);

    Tensor forward(const Tensor& x, const AlphaTable& alphas, bool training);
    std::vector<ParamPtr> weight_params() const;

private:
    Conv2dLayer stem_conv_;
    BatchNorm2dLayer stem_bn_;
    std::vector<SuperCell> cells_;
    LinearLayer classifier_;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    float w_lr = 0.0f;
};

struct SearchResult {
    AlphaTable alphas;
    std::vector<EpochStats> history;
};

// One alternating step of Eq.-style bi-level optimization. The alpha phase
// touches only the alpha tables; the weight phase touches only the network
// weights. Returns (train_loss, val_loss) evaluated before their respective
// updates.
class BilevelStepper {
public:
    BilevelStepper(SuperNet& net, AlphaTable& alphas, const SearchConfig& config);

    // Adam step on L_val with w frozen (first-order)
    float alpha_step(const Tensor& val_x, const std::vector<int>& val_y);
    // momentum-SGD step on L_train with alpha frozen
    float weight_step(const Tensor& train_x, const std::vector<int>& train_y, float w_lr);

    std::pair<float, float> step(const Tensor& train_x, const std::vector<int>& train_y,
                                 const Tensor& val_x, const std::vector<int>& val_y,
                                 float w_lr);

private:
    SuperNet& net_;
    AlphaTable& alphas_;
    SearchConfig config_;
    std::vector<ParamPtr> weights_;
    AdamOptimizer alpha_opt_;
};

SearchResult search_run(const SplitDataset& data, const SearchConfig& config);

// argmax over non-zero ops per edge, then the top-2 incoming edges per node
// by chosen-op softmax weight; ties by lower predecessor then op order.
Genotype derive_genotype(const AlphaTable& alphas);

std::string history_csv(const std::vector<EpochStats>& history);

}  // namespace pocketnet
