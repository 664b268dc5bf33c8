#pragma once

// Thin layer wrappers over the tensor ops: each owns its parameters (and
// batch-norm running stats), knows its construction-time name prefix, and can
// enumerate parameters / serializable state.

#include <memory>
#include <string>
#include <vector>

#include "pocketnet/tensor.hpp"

namespace pocketnet {

struct Conv2dLayer {
    ParamPtr weight;
    int stride = 1, padding = 0, groups = 1;

    static Conv2dLayer make(int in_c, int out_c, int k, int stride, int padding, int groups,
                            const std::string& name, Rng& rng);
    Tensor forward(const Tensor& x) const { return conv2d(x, weight->value, stride, padding, groups); }
    void collect_params(std::vector<ParamPtr>& out) const { out.push_back(weight); }
    void collect_state(std::vector<NamedTensorRef>& out) const;
};

struct BatchNorm2dLayer {
    ParamPtr scale, shift;
    RunningStats stats;
    std::string prefix;
    float eps = 1e-5f;
    float momentum = 0.1f;

    static BatchNorm2dLayer make(int channels, const std::string& name);
    Tensor forward(const Tensor& x, bool training) {
        return batchnorm2d(x, scale->value, shift->value, stats,
                           training ? BnMode::train : BnMode::eval, eps, momentum);
    }
    void collect_params(std::vector<ParamPtr>& out) const {
        out.push_back(scale);
        out.push_back(shift);
    }
    void collect_state(std::vector<NamedTensorRef>& out);
};

struct PReLULayer {
    ParamPtr slope;

    static PReLULayer make(int channels, const std::string& name);
    Tensor forward(const Tensor& x) const { return prelu(x, slope->value); }
    void collect_params(std::vector<ParamPtr>& out) const { out.push_back(slope); }
    void collect_state(std::vector<NamedTensorRef>& out) const;
};

// bias-free linear: x [M,D] -> [M,C]
struct LinearLayer {
    ParamPtr weight;  // [C, D]

    static LinearLayer make(int in_dim, int out_dim, const std::string& name, Rng& rng);
    Tensor forward(const Tensor& x) const { return linear_nt(x, weight->value); }
    void collect_params(std::vector<ParamPtr>& out) const { out.push_back(weight); }
    void collect_state(std::vector<NamedTensorRef>& out) const;
};

}  // namespace pocketnet
