#pragma once

// Dense float32 tensors (rank 1-4, NCHW layout for rank 4) with reverse-mode
// automatic differentiation. A Tensor is a shared handle to a buffer plus the
// graph edge that produced it; backward() replays the recorded graph once in
// reverse topological order and accumulates into the .grad of every tensor
// that requires gradients.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pocketnet/errors.hpp"
#include "pocketnet/rng.hpp"

namespace pocketnet {

namespace detail {

struct TensorImpl;
using TensorImplPtr = std::shared_ptr<TensorImpl>;

// Writes this node's contribution into the pass-local gradient buffers of its
// parents (entry is nullptr when that parent does not need a gradient).
using BackwardFn = std::function<void(const std::vector<float>& out_grad,
                                      const std::vector<std::vector<float>*>& parent_grads)>;

struct TensorImpl {
    std::vector<int> shape;
    std::vector<float> data;
    std::vector<float> grad;  // persistent, allocated for requires_grad tensors
    bool requires_grad = false;
    std::vector<TensorImplPtr> parents;
    BackwardFn backward_fn;  // empty for leaves
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                            bool requires_grad = false);
    static Tensor scalar(float v);
    static Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f,
                        bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const;
    int rank() const;
    int dim(int i) const;
    int numel() const;
    bool requires_grad() const;

    std::vector<float>& data();
    const std::vector<float>& data() const;

    bool has_grad() const;
    std::vector<float>& grad();
    const std::vector<float>& grad() const;
    void zero_grad();

    // value of a single-element tensor
    float item() const;

    // copy of the values, detached from the graph
    Tensor detach() const;

    detail::TensorImplPtr impl() const { return impl_; }
    static Tensor wrap(detail::TensorImplPtr impl) { return Tensor(std::move(impl)); }

private:
    explicit Tensor(detail::TensorImplPtr impl) : impl_(std::move(impl)) {}
    detail::TensorImplPtr impl_;
};

// Ops record graph edges only while grad mode is enabled (thread-local).
bool grad_enabled();
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};

// Backward from a scalar loss; rejects non-scalar outputs.
void backward(const Tensor& loss);
// Backward from an arbitrary output with an explicit cotangent.
void backward_with_cotangent(const Tensor& out, std::span<const float> cotangent);

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

// input NCHW, weight [out_c, in_c/groups, k, k], bias-free.
Tensor conv2d(const Tensor& input, const Tensor& weight, int stride, int padding,
              int groups = 1);

enum class PoolKind { max, avg };
Tensor pool2d(const Tensor& input, PoolKind kind, int k, int stride, int padding = 1);

struct RunningStats {
    std::vector<float> mean;
    std::vector<float> var;
    static RunningStats make(int channels);
};
enum class BnMode { train, eval };
Tensor batchnorm2d(const Tensor& input, const Tensor& scale, const Tensor& shift,
                   RunningStats& stats, BnMode mode, float eps = 1e-5f,
                   float momentum = 0.1f);

// out = max(0,x) + slope_c * min(0,x), one slope per channel (dim 1)
Tensor prelu(const Tensor& input, const Tensor& slope);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, float s);
// out = sum_k weights[k] * xs[k]; differentiable in both
Tensor weighted_sum(std::span<const Tensor> xs, const Tensor& weights);
Tensor concat_channels(std::span<const Tensor> xs);
Tensor softmax(const Tensor& v);          // rank-1
Tensor log(const Tensor& v);
Tensor exp(const Tensor& v);
Tensor l2_normalize(const Tensor& v, float min_norm = 1e-12f);        // rank-1
Tensor l2_normalize_rows(const Tensor& m, float min_norm = 1e-12f);   // rank-2
Tensor mse_mean(const Tensor& a, const Tensor& b);
// logits [M,C] (rank-1 treated as M=1), one label per row
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
// x [M,D] * w [C,D]^T -> [M,C]
Tensor linear_nt(const Tensor& x, const Tensor& w);
Tensor row(const Tensor& m, int i);       // rank-2 -> rank-1 slice
Tensor sum(const Tensor& t);              // scalar
Tensor global_avg_pool(const Tensor& x);  // [N,C,H,W] -> [N,C]
Tensor reshape(const Tensor& t, std::vector<int> new_shape);
// ArcFace margin applied to the target column of a cosine matrix [M,C]:
// target -> s*cos(theta + m) with theta clamped to [0, pi - m - 1e-6],
// non-target -> s*cos(theta).
Tensor arcface_logits(const Tensor& cosines, std::span<const int> labels, float s, float m);

// ---------------------------------------------------------------------------
// Parameters and optimizers
// ---------------------------------------------------------------------------

struct Parameter {
    Tensor value;  // requires_grad
    std::vector<float> momentum_buffer;  // sized on first SGD step
    std::string name;
};
using ParamPtr = std::shared_ptr<Parameter>;

ParamPtr make_param(std::string name, Tensor value);

void zero_grads(std::span<const ParamPtr> params);

// v <- momentum*v + (g + wd*w); w <- w - lr*v
void sgd_step(std::span<const ParamPtr> params, float lr, float momentum,
              float weight_decay);

// Adam with bias correction; L2 weight decay folded into the gradient.
class AdamOptimizer {
public:
    AdamOptimizer(std::vector<ParamPtr> params, float beta1, float beta2,
                  float weight_decay, float eps = 1e-8f);
    void step(float lr);
    const std::vector<ParamPtr>& params() const { return params_; }

private:
    std::vector<ParamPtr> params_;
    std::vector<std::vector<float>> exp_avg_;
    std::vector<std::vector<float>> exp_avg_sq_;
    float beta1_, beta2_, weight_decay_, eps_;
    long step_count_ = 0;
};

// Named view into a float buffer, used for checkpointing whole networks
// (parameters plus batch-norm running stats).
struct NamedTensorRef {
    std::string name;
    std::vector<int> shape;
    std::vector<float>* values = nullptr;
};

}  // namespace pocketnet
