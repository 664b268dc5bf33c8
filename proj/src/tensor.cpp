#include "pocketnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace pocketnet {

namespace {

thread_local bool g_grad_enabled = true;

long long product(const std::vector<int>& shape) {
    long long n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

void check_shape(const std::vector<int>& shape) {
    if (shape.empty() || shape.size() > 4)
        throw DataError("tensor rank must be 1..4, got " + shape_str(shape));
    for (int d : shape)
        if (d <= 0) throw DataError("tensor extents must be positive, got " + shape_str(shape));
}

detail::TensorImplPtr new_impl(std::vector<int> shape, std::vector<float> data,
                               bool requires_grad) {
    check_shape(shape);
    if (static_cast<long long>(data.size()) != product(shape))
        throw DataError("data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    if (requires_grad) impl->grad.assign(impl->data.size(), 0.0f);
    return impl;
}

// Builds the op result: records parents + backward only when grad mode is on
// and at least one parent requires a gradient.
Tensor make_result(std::vector<int> shape, std::vector<float> data,
                   std::vector<detail::TensorImplPtr> parents, detail::BackwardFn fn) {
    auto impl = new_impl(std::move(shape), std::move(data), false);
    bool needs = false;
    if (g_grad_enabled)
        for (const auto& p : parents)
            if (p && p->requires_grad) needs = true;
    if (needs) {
        impl->requires_grad = true;
        impl->parents = std::move(parents);
        impl->backward_fn = std::move(fn);
    }
    return Tensor::wrap(impl);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto n = product(shape);
    return Tensor(new_impl(std::move(shape), std::vector<float>(n, 0.0f), requires_grad));
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
    auto n = product(shape);
    return Tensor(new_impl(std::move(shape), std::vector<float>(n, value), requires_grad));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
    return Tensor(new_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(float v) { return from_data({1}, {v}); }

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, float stddev, bool requires_grad) {
    auto n = product(shape);
    std::vector<float> data(n);
    for (auto& x : data) x = rng.gaussian(0.0f, stddev);
    return Tensor(new_impl(std::move(shape), std::move(data), requires_grad));
}

const std::vector<int>& Tensor::shape() const { return impl_->shape; }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }
int Tensor::dim(int i) const { return impl_->shape.at(i); }
int Tensor::numel() const { return static_cast<int>(impl_->data.size()); }
bool Tensor::requires_grad() const { return impl_->requires_grad; }
std::vector<float>& Tensor::data() { return impl_->data; }
const std::vector<float>& Tensor::data() const { return impl_->data; }
bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::vector<float>& Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
    return impl_->grad;
}

const std::vector<float>& Tensor::grad() const {
    if (impl_->grad.empty()) throw UsageError("gradient not populated for this tensor");
    return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0f); }

float Tensor::item() const {
    if (numel() != 1) throw DataError("item() on tensor of shape " + shape_str(impl_->shape));
    return impl_->data[0];
}

Tensor Tensor::detach() const {
    return Tensor(new_impl(impl_->shape, impl_->data, false));
}

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

// ---------------------------------------------------------------------------
// Backward engine
// ---------------------------------------------------------------------------

void backward_with_cotangent(const Tensor& out, std::span<const float> cotangent) {
    auto root = out.impl();
    if (!root) throw UsageError("backward on undefined tensor");
    if (static_cast<size_t>(out.numel()) != cotangent.size())
        throw DataError("cotangent length does not match output");
    if (!root->requires_grad) return;

    // reverse topological order: node before its parents
    std::vector<detail::TensorImpl*> order;
    {
        std::unordered_set<detail::TensorImpl*> seen;
        std::vector<std::pair<detail::TensorImpl*, size_t>> stack;
        stack.emplace_back(root.get(), 0);
        seen.insert(root.get());
        std::vector<detail::TensorImpl*> post;
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                auto* parent = node->parents[idx].get();
                ++idx;
                if (parent && parent->requires_grad && !seen.count(parent)) {
                    seen.insert(parent);
                    stack.emplace_back(parent, 0);
                }
            } else {
                post.push_back(node);
                stack.pop_back();
            }
        }
        order.assign(post.rbegin(), post.rend());
    }

    // pass-local gradient buffers keep repeated backward calls additive
    std::unordered_map<detail::TensorImpl*, std::vector<float>> local;
    local[root.get()].assign(cotangent.begin(), cotangent.end());

    for (auto* node : order) {
        auto it = local.find(node);
        if (it == local.end()) continue;
        if (!node->backward_fn) continue;
        std::vector<std::vector<float>*> parent_grads(node->parents.size(), nullptr);
        for (size_t i = 0; i < node->parents.size(); ++i) {
            auto& p = node->parents[i];
            if (p && p->requires_grad) {
                auto& buf = local[p.get()];
                if (buf.empty()) buf.assign(p->data.size(), 0.0f);
                parent_grads[i] = &buf;
            }
        }
        node->backward_fn(it->second, parent_grads);
    }

    for (auto& [node, g] : local) {
        if (!node->requires_grad) continue;
        if (node->grad.empty()) node->grad.assign(node->data.size(), 0.0f);
        for (size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
    }
}

void backward(const Tensor& loss) {
    if (!loss.defined()) throw UsageError("backward on undefined tensor");
    if (loss.numel() != 1)
        throw UsageError("backward requires a scalar loss, got shape " +
                         shape_str(loss.shape()));
    const float one = 1.0f;
    backward_with_cotangent(loss, std::span<const float>(&one, 1));
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, int stride, int padding,
              int groups) {
    if (input.rank() != 4) throw DataError("conv2d input must be rank 4, got " +
                                           shape_str(input.shape()));
    if (weight.rank() != 4) throw DataError("conv2d weight must be rank 4, got " +
                                            shape_str(weight.shape()));
    if (stride < 1) throw UsageError("conv2d stride must be >= 1");
    if (padding < 0) throw UsageError("conv2d padding must be >= 0");
    const int n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int cout = weight.dim(0), wcin = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
    if (kh != kw) throw DataError("conv2d requires square kernels, got " +
                                  shape_str(weight.shape()));
    if (groups < 1 || cin % groups != 0 || cout % groups != 0)
        throw DataError("conv2d groups " + std::to_string(groups) +
                        " must divide channels (in " + std::to_string(cin) + ", out " +
                        std::to_string(cout) + ")");
    if (wcin != cin / groups)
        throw DataError("conv2d weight " + shape_str(weight.shape()) +
                        " incompatible with input " + shape_str(input.shape()) +
                        " at groups " + std::to_string(groups));
    const int k = kh;
    const int ho = (h + 2 * padding - k) / stride + 1;
    const int wo = (w + 2 * padding - k) / stride + 1;
    if (ho < 1 || wo < 1)
        throw DataError("conv2d output would be empty: input " + shape_str(input.shape()) +
                        " kernel " + std::to_string(k) + " stride " + std::to_string(stride));

    const int cing = cin / groups;
    const int coutg = cout / groups;
    const auto& x = input.data();
    const auto& wt = weight.data();
    std::vector<float> out(static_cast<size_t>(n) * cout * ho * wo, 0.0f);

    for (int b = 0; b < n; ++b) {
        for (int oc = 0; oc < cout; ++oc) {
            const int g = oc / coutg;
            const int ic0 = g * cing;
            for (int oh = 0; oh < ho; ++oh) {
                for (int ow = 0; ow < wo; ++ow) {
                    float acc = 0.0f;
                    for (int icl = 0; icl < cing; ++icl) {
                        const float* xp = &x[((static_cast<size_t>(b) * cin + ic0 + icl) * h) * w];
                        const float* wp = &wt[((static_cast<size_t>(oc) * cing + icl) * k) * k];
                        for (int r = 0; r < k; ++r) {
                            const int ih = oh * stride - padding + r;
                            if (ih < 0 || ih >= h) continue;
                            for (int c = 0; c < k; ++c) {
                                const int iw = ow * stride - padding + c;
                                if (iw < 0 || iw >= w) continue;
                                acc += xp[ih * w + iw] * wp[r * k + c];
                            }
                        }
                    }
                    out[((static_cast<size_t>(b) * cout + oc) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }

    auto xi = input.impl();
    auto wi = weight.impl();
    return make_result(
        {n, cout, ho, wo}, std::move(out), {xi, wi},
        [xi, wi, n, cin, cout, h, w, k, ho, wo, stride, padding, cing,
         coutg](const std::vector<float>& g, const std::vector<std::vector<float>*>& pg) {
            const auto& x = xi->data;
            const auto& wt = wi->data;
            auto* dx = pg[0];
            auto* dw = pg[1];
            for (int b = 0; b < n; ++b) {
                for (int oc = 0; oc < cout; ++oc) {
                    const int grp = oc / coutg;
                    const int ic0 = grp * cing;
                    for (int oh = 0; oh < ho; ++oh) {
                        for (int ow = 0; ow < wo; ++ow) {
                            const float go =
                                g[((static_cast<size_t>(b) * cout + oc) * ho + oh) * wo + ow];
                            if (go == 0.0f) continue;
                            for (int icl = 0; icl < cing; ++icl) {
                                const size_t xoff =
                                    (static_cast<size_t>(b) * cin + ic0 + icl) * h * w;
                                const size_t woff =
                                    (static_cast<size_t>(oc) * cing + icl) * k * k;
                                for (int r = 0; r < k; ++r) {
                                    const int ih = oh * stride - padding + r;
                                    if (ih < 0 || ih >= h) continue;
                                    for (int c = 0; c < k; ++c) {
                                        const int iw = ow * stride - padding + c;
                                        if (iw < 0 || iw >= w) continue;
                                        if (dx) (*dx)[xoff + ih * w + iw] += go * wt[woff + r * k + c];
                                        if (dw) (*dw)[woff + r * k + c] += go * x[xoff + ih * w + iw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

Tensor pool2d(const Tensor& input, PoolKind kind, int k, int stride, int padding) {
    if (input.rank() != 4) throw DataError("pool2d input must be rank 4, got " +
                                           shape_str(input.shape()));
    if (k < 1 || stride < 1 || padding < 0) throw UsageError("pool2d bad k/stride/padding");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int ho = (h + 2 * padding - k) / stride + 1;
    const int wo = (w + 2 * padding - k) / stride + 1;
    if (ho < 1 || wo < 1) throw DataError("pool2d output would be empty");

    const auto& x = input.data();
    std::vector<float> out(static_cast<size_t>(n) * c * ho * wo, 0.0f);
    // max pool remembers the argmax flat offset per output cell
    std::vector<int> argmax;
    if (kind == PoolKind::max) argmax.assign(out.size(), -1);
    const float inv_area = 1.0f / static_cast<float>(k * k);

    for (int b = 0; b < n; ++b) {
        for (int ch = 0; ch < c; ++ch) {
            const size_t xoff = (static_cast<size_t>(b) * c + ch) * h * w;
            for (int oh = 0; oh < ho; ++oh) {
                for (int ow = 0; ow < wo; ++ow) {
                    const size_t oidx = ((static_cast<size_t>(b) * c + ch) * ho + oh) * wo + ow;
                    if (kind == PoolKind::avg) {
                        float acc = 0.0f;
                        for (int r = 0; r < k; ++r) {
                            const int ih = oh * stride - padding + r;
                            if (ih < 0 || ih >= h) continue;
                            for (int cc = 0; cc < k; ++cc) {
                                const int iw = ow * stride - padding + cc;
                                if (iw < 0 || iw >= w) continue;
                                acc += x[xoff + ih * w + iw];
                            }
                        }
                        out[oidx] = acc * inv_area;
                    } else {
                        float best = 0.0f;
                        int best_at = -1;
                        for (int r = 0; r < k; ++r) {
                            const int ih = oh * stride - padding + r;
                            if (ih < 0 || ih >= h) continue;
                            for (int cc = 0; cc < k; ++cc) {
                                const int iw = ow * stride - padding + cc;
                                if (iw < 0 || iw >= w) continue;
                                const float v = x[xoff + ih * w + iw];
                                if (best_at < 0 || v > best) {  // first index wins ties
                                    best = v;
                                    best_at = static_cast<int>(xoff + ih * w + iw);
                                }
                            }
                        }
                        out[oidx] = best;
                        argmax[oidx] = best_at;
                    }
                }
            }
        }
    }

    auto xi = input.impl();
    return make_result(
        {n, c, ho, wo}, std::move(out), {xi},
        [xi, kind, n, c, h, w, k, ho, wo, stride, padding, inv_area,
         argmax = std::move(argmax)](const std::vector<float>& g,
                                     const std::vector<std::vector<float>*>& pg) {
            auto* dx = pg[0];
            if (!dx) return;
            if (kind == PoolKind::max) {
                for (size_t i = 0; i < g.size(); ++i)
                    if (argmax[i] >= 0) (*dx)[argmax[i]] += g[i];
                return;
            }
            for (int b = 0; b < n; ++b) {
                for (int ch = 0; ch < c; ++ch) {
                    const size_t xoff = (static_cast<size_t>(b) * c + ch) * h * w;
                    for (int oh = 0; oh < ho; ++oh) {
                        for (int ow = 0; ow < wo; ++ow) {
                            const float go =
                                g[((static_cast<size_t>(b) * c + ch) * ho + oh) * wo + ow] *
                                inv_area;
                            if (go == 0.0f) continue;
                            for (int r = 0; r < k; ++r) {
                                const int ih = oh * stride - padding + r;
                                if (ih < 0 || ih >= h) continue;
                                for (int cc = 0; cc < k; ++cc) {
                                    const int iw = ow * stride - padding + cc;
                                    if (iw < 0 || iw >= w) continue;
                                    (*dx)[xoff + ih * w + iw] += go;
                                }
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

RunningStats RunningStats::make(int channels) {
    RunningStats s;
    s.mean.assign(channels, 0.0f);
    s.var.assign(channels, 1.0f);
    return s;
}

Tensor batchnorm2d(const Tensor& input, const Tensor& scale, const Tensor& shift,
                   RunningStats& stats, BnMode mode, float eps, float momentum) {
    if (input.rank() != 4) throw DataError("batchnorm2d input must be rank 4, got " +
                                           shape_str(input.shape()));
    if (eps <= 0.0f) throw UsageError("batchnorm2d eps must be > 0");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (scale.numel() != c || shift.numel() != c)
        throw DataError("batchnorm2d scale/shift length must equal channel count " +
                        std::to_string(c));
    if (static_cast<int>(stats.mean.size()) != c || static_cast<int>(stats.var.size()) != c)
        throw DataError("batchnorm2d running stats length must equal channel count");
    const long cnt = static_cast<long>(n) * h * w;
    if (mode == BnMode::train && cnt == 1)
        throw DataError("batchnorm2d train mode needs more than one value per channel "
                        "(zero variance)");

    const auto& x = input.data();
    const auto& gamma = scale.data();
    const auto& beta = shift.data();
    std::vector<float> mean_used(c), var_used(c);

    if (mode == BnMode::train) {
        for (int ch = 0; ch < c; ++ch) {
            double m = 0.0;
            for (int b = 0; b < n; ++b) {
                const size_t off = (static_cast<size_t>(b) * c + ch) * h * w;
                for (long i = 0; i < static_cast<long>(h) * w; ++i) m += x[off + i];
            }
            m /= static_cast<double>(cnt);
            double v = 0.0;
            for (int b = 0; b < n; ++b) {
                const size_t off = (static_cast<size_t>(b) * c + ch) * h * w;
                for (long i = 0; i < static_cast<long>(h) * w; ++i) {
                    const double d = x[off + i] - m;
                    v += d * d;
                }
            }
            v /= static_cast<double>(cnt);  // biased, used for normalization
            mean_used[ch] = static_cast<float>(m);
            var_used[ch] = static_cast<float>(v);
            const float unbiased =
                static_cast<float>(v * static_cast<double>(cnt) / static_cast<double>(cnt - 1));
            stats.mean[ch] = (1.0f - momentum) * stats.mean[ch] + momentum * mean_used[ch];
            stats.var[ch] = (1.0f - momentum) * stats.var[ch] + momentum * unbiased;
        }
    } else {
        mean_used = stats.mean;
        var_used = stats.var;
    }

    std::vector<float> out(x.size());
    std::vector<float> inv_std(c);
    for (int ch = 0; ch < c; ++ch)
        inv_std[ch] = 1.0f / std::sqrt(var_used[ch] + eps);
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const size_t off = (static_cast<size_t>(b) * c + ch) * h * w;
            const float mu = mean_used[ch], is = inv_std[ch], ga = gamma[ch], be = beta[ch];
            for (long i = 0; i < static_cast<long>(h) * w; ++i)
                out[off + i] = ga * (x[off + i] - mu) * is + be;
        }

    auto xi = input.impl();
    auto si = scale.impl();
    auto bi = shift.impl();
    const bool train = (mode == BnMode::train);
    return make_result(
        input.shape(), std::move(out), {xi, si, bi},
        [xi, si, n, c, h, w, cnt, train, mean_used = std::move(mean_used),
         inv_std = std::move(inv_std)](const std::vector<float>& g,
                                       const std::vector<std::vector<float>*>& pg) {
            const auto& x = xi->data;
            const auto& gamma = si->data;
            auto* dx = pg[0];
            auto* dgamma = pg[1];
            auto* dbeta = pg[2];
            const long hw = static_cast<long>(h) * w;
            for (int ch = 0; ch < c; ++ch) {
                const float mu = mean_used[ch], is = inv_std[ch], ga = gamma[ch];
                double sum_g = 0.0, sum_gx = 0.0;
                for (int b = 0; b < n; ++b) {
                    const size_t off = (static_cast<size_t>(b) * c + ch) * hw;
                    for (long i = 0; i < hw; ++i) {
                        const float go = g[off + i];
                        sum_g += go;
                        sum_gx += static_cast<double>(go) * (x[off + i] - mu) * is;
                    }
                }
                if (dgamma) (*dgamma)[ch] += static_cast<float>(sum_gx);
                if (dbeta) (*dbeta)[ch] += static_cast<float>(sum_g);
                if (!dx) continue;
                if (!train) {
                    for (int b = 0; b < n; ++b) {
                        const size_t off = (static_cast<size_t>(b) * c + ch) * hw;
                        for (long i = 0; i < hw; ++i) (*dx)[off + i] += g[off + i] * ga * is;
                    }
                    continue;
                }
                // dxhat = g*gamma; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
                const double mean_dxhat = sum_g * ga / static_cast<double>(cnt);
                const double mean_dxhat_xhat = sum_gx * ga / static_cast<double>(cnt);
                for (int b = 0; b < n; ++b) {
                    const size_t off = (static_cast<size_t>(b) * c + ch) * hw;
                    for (long i = 0; i < hw; ++i) {
                        const double xhat = (x[off + i] - mu) * is;
                        const double dxhat = static_cast<double>(g[off + i]) * ga;
                        (*dx)[off + i] += static_cast<float>(
                            (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * is);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// PReLU
// ---------------------------------------------------------------------------

Tensor prelu(const Tensor& input, const Tensor& slope) {
    if (input.rank() < 2) throw DataError("prelu input must have a channel dimension");
    const int c = input.dim(1);
    if (slope.numel() != c)
        throw DataError("prelu slope length " + std::to_string(slope.numel()) +
                        " != channel count " + std::to_string(c));
    const int n = input.dim(0);
    long inner = 1;
    for (int i = 2; i < input.rank(); ++i) inner *= input.dim(i);

    const auto& x = input.data();
    const auto& a = slope.data();
    std::vector<float> out(x.size());
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const size_t off = (static_cast<size_t>(b) * c + ch) * inner;
            const float s = a[ch];
            for (long i = 0; i < inner; ++i) {
                const float v = x[off + i];
                out[off + i] = v >= 0.0f ? v : s * v;
            }
        }

    auto xi = input.impl();
    auto ai = slope.impl();
    return make_result(input.shape(), std::move(out), {xi, ai},
                       [xi, ai, n, c, inner](const std::vector<float>& g,
                                             const std::vector<std::vector<float>*>& pg) {
                           const auto& x = xi->data;
                           const auto& a = ai->data;
                           auto* dx = pg[0];
                           auto* da = pg[1];
                           for (int b = 0; b < n; ++b)
                               for (int ch = 0; ch < c; ++ch) {
                                   const size_t off = (static_cast<size_t>(b) * c + ch) * inner;
                                   const float s = a[ch];
                                   for (long i = 0; i < inner; ++i) {
                                       const float v = x[off + i];
                                       const float go = g[off + i];
                                       if (dx) (*dx)[off + i] += v >= 0.0f ? go : s * go;
                                       if (da && v < 0.0f) (*da)[ch] += go * v;
                                   }
                               }
                       });
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DataError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
    std::vector<float> out(a.numel());
    const auto& x = a.data();
    const auto& y = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return make_result(a.shape(), std::move(out), {a.impl(), b.impl()},
                       [](const std::vector<float>& g,
                          const std::vector<std::vector<float>*>& pg) {
                           for (auto* d : pg)
                               if (d)
                                   for (size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
                       });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DataError("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
    std::vector<float> out(a.numel());
    const auto& x = a.data();
    const auto& y = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    auto ai = a.impl();
    auto bi = b.impl();
    return make_result(a.shape(), std::move(out), {ai, bi},
                       [ai, bi](const std::vector<float>& g,
                                const std::vector<std::vector<float>*>& pg) {
                           if (pg[0])
                               for (size_t i = 0; i < g.size(); ++i)
                                   (*pg[0])[i] += g[i] * bi->data[i];
                           if (pg[1])
                               for (size_t i = 0; i < g.size(); ++i)
                                   (*pg[1])[i] += g[i] * ai->data[i];
                       });
}

Tensor scalar_mul(const Tensor& a, float s) {
    std::vector<float> out(a.numel());
    const auto& x = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
    return make_result(a.shape(), std::move(out), {a.impl()},
                       [s](const std::vector<float>& g,
                           const std::vector<std::vector<float>*>& pg) {
                           if (pg[0])
                               for (size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * s;
                       });
}

Tensor weighted_sum(std::span<const Tensor> xs, const Tensor& weights) {
    if (xs.empty()) throw UsageError("weighted_sum needs at least one input");
    if (weights.rank() != 1 || weights.numel() != static_cast<int>(xs.size()))
        throw DataError("weighted_sum weights must be rank-1 with one entry per input");
    for (const auto& t : xs)
        if (t.shape() != xs[0].shape())
            throw DataError("weighted_sum inputs must share a shape: " +
                            shape_str(xs[0].shape()) + " vs " + shape_str(t.shape()));
    const size_t n = xs[0].numel();
    const auto& wv = weights.data();
    std::vector<float> out(n, 0.0f);
    for (size_t k = 0; k < xs.size(); ++k) {
        const auto& x = xs[k].data();
        const float wk = wv[k];
        for (size_t i = 0; i < n; ++i) out[i] += wk * x[i];
    }
    std::vector<detail::TensorImplPtr> parents;
    parents.reserve(xs.size() + 1);
    for (const auto& t : xs) parents.push_back(t.impl());
    parents.push_back(weights.impl());
    auto wi = weights.impl();
    std::vector<detail::TensorImplPtr> xi(parents.begin(), parents.end() - 1);
    return make_result(xs[0].shape(), std::move(out), std::move(parents),
                       [xi, wi](const std::vector<float>& g,
                                const std::vector<std::vector<float>*>& pg) {
                           const size_t kcount = xi.size();
                           for (size_t k = 0; k < kcount; ++k) {
                               if (pg[k]) {
                                   const float wk = wi->data[k];
                                   for (size_t i = 0; i < g.size(); ++i)
                                       (*pg[k])[i] += wk * g[i];
                               }
                           }
                           if (pg[kcount]) {
                               for (size_t k = 0; k < kcount; ++k) {
                                   double acc = 0.0;
                                   const auto& x = xi[k]->data;
                                   for (size_t i = 0; i < g.size(); ++i)
                                       acc += static_cast<double>(g[i]) * x[i];
                                   (*pg[kcount])[k] += static_cast<float>(acc);
                               }
                           }
                       });
}

Tensor concat_channels(std::span<const Tensor> xs) {
    if (xs.empty()) throw UsageError("concat_channels needs at least one input");
    const auto& first = xs[0];
    if (first.rank() != 4) throw DataError("concat_channels expects rank-4 inputs");
    int ctotal = 0;
    for (const auto& t : xs) {
        if (t.rank() != 4 || t.dim(0) != first.dim(0) || t.dim(2) != first.dim(2) ||
            t.dim(3) != first.dim(3))
            throw DataError("concat_channels non-channel dims mismatch: " +
                            shape_str(first.shape()) + " vs " + shape_str(t.shape()));
        ctotal += t.dim(1);
    }
    const int n = first.dim(0), h = first.dim(2), w = first.dim(3);
    const long hw = static_cast<long>(h) * w;
    std::vector<float> out(static_cast<size_t>(n) * ctotal * hw);
    std::vector<int> coffsets;
    int coff = 0;
    for (const auto& t : xs) {
        coffsets.push_back(coff);
        const int ck = t.dim(1);
        const auto& x = t.data();
        for (int b = 0; b < n; ++b) {
            const size_t src = static_cast<size_t>(b) * ck * hw;
            const size_t dst = (static_cast<size_t>(b) * ctotal + coff) * hw;
            std::copy(x.begin() + src, x.begin() + src + static_cast<size_t>(ck) * hw,
                      out.begin() + dst);
        }
        coff += ck;
    }
    std::vector<detail::TensorImplPtr> parents;
    std::vector<int> cks;
    for (const auto& t : xs) {
        parents.push_back(t.impl());
        cks.push_back(t.dim(1));
    }
    return make_result({n, ctotal, h, w}, std::move(out), std::move(parents),
                       [n, hw, ctotal, cks = std::move(cks),
                        coffsets = std::move(coffsets)](
                           const std::vector<float>& g,
                           const std::vector<std::vector<float>*>& pg) {
                           for (size_t k = 0; k < cks.size(); ++k) {
                               if (!pg[k]) continue;
                               const int ck = cks[k];
                               for (int b = 0; b < n; ++b) {
                                   const size_t src =
                                       (static_cast<size_t>(b) * ctotal + coffsets[k]) * hw;
                                   const size_t dst = static_cast<size_t>(b) * ck * hw;
                                   for (long i = 0; i < static_cast<long>(ck) * hw; ++i)
                                       (*pg[k])[dst + i] += g[src + i];
                               }
                           }
                       });
}

Tensor softmax(const Tensor& v) {
    if (v.rank() != 1) throw DataError("softmax expects rank-1 input, got " +
                                       shape_str(v.shape()));
    const auto& x = v.data();
    for (float xv : x)
        if (!std::isfinite(xv)) throw NumericError("softmax input is not finite");
    const float mx = *std::max_element(x.begin(), x.end());
    std::vector<float> out(x.size());
    double denom = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - mx);
        denom += out[i];
    }
    for (auto& o : out) o = static_cast<float>(o / denom);
    std::vector<float> y = out;
    return make_result(v.shape(), std::move(out), {v.impl()},
                       [y = std::move(y)](const std::vector<float>& g,
                                          const std::vector<std::vector<float>*>& pg) {
                           if (!pg[0]) return;
                           double dot = 0.0;
                           for (size_t i = 0; i < g.size(); ++i)
                               dot += static_cast<double>(g[i]) * y[i];
                           for (size_t i = 0; i < g.size(); ++i)
                               (*pg[0])[i] += y[i] * static_cast<float>(g[i] - dot);
                       });
}

Tensor log(const Tensor& v) {
    std::vector<float> out(v.numel());
    const auto& x = v.data();
    for (size_t i = 0; i < out.size(); ++i) {
        if (x[i] <= 0.0f) throw NumericError("log of non-positive value");
        out[i] = std::log(x[i]);
    }
    auto vi = v.impl();
    return make_result(v.shape(), std::move(out), {vi},
                       [vi](const std::vector<float>& g,
                            const std::vector<std::vector<float>*>& pg) {
                           if (pg[0])
                               for (size_t i = 0; i < g.size(); ++i)
                                   (*pg[0])[i] += g[i] / vi->data[i];
                       });
}

Tensor exp(const Tensor& v) {
    std::vector<float> out(v.numel());
    const auto& x = v.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
    std::vector<float> y = out;
    return make_result(v.shape(), std::move(out), {v.impl()},
                       [y = std::move(y)](const std::vector<float>& g,
                                          const std::vector<std::vector<float>*>& pg) {
                           if (pg[0])
                               for (size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * y[i];
                       });
}

namespace {

// shared row-normalize kernel; rows = 1 for the rank-1 case
Tensor normalize_impl(const Tensor& t, int rows, int cols, float min_norm) {
    const auto& x = t.data();
    std::vector<float> out(x.size());
    std::vector<float> norms(rows);
    for (int r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int i = 0; i < cols; ++i) {
            const float v = x[static_cast<size_t>(r) * cols + i];
            s += static_cast<double>(v) * v;
        }
        const float nrm = static_cast<float>(std::sqrt(s));
        if (nrm <= min_norm)
            throw NumericError("l2_normalize of (near-)zero vector at row " +
                               std::to_string(r));
        norms[r] = nrm;
        for (int i = 0; i < cols; ++i)
            out[static_cast<size_t>(r) * cols + i] = x[static_cast<size_t>(r) * cols + i] / nrm;
    }
    std::vector<float> y = out;
    return make_result(t.shape(), std::move(out), {t.impl()},
                       [rows, cols, y = std::move(y), norms = std::move(norms)](
                           const std::vector<float>& g,
                           const std::vector<std::vector<float>*>& pg) {
                           if (!pg[0]) return;
                           for (int r = 0; r < rows; ++r) {
                               const size_t off = static_cast<size_t>(r) * cols;
                               double dot = 0.0;
                               for (int i = 0; i < cols; ++i)
                                   dot += static_cast<double>(g[off + i]) * y[off + i];
                               const float inv = 1.0f / norms[r];
                               for (int i = 0; i < cols; ++i)
                                   (*pg[0])[off + i] +=
                                       (g[off + i] - y[off + i] * static_cast<float>(dot)) * inv;
                           }
                       });
}

}  // namespace

Tensor l2_normalize(const Tensor& v, float min_norm) {
    if (v.rank() != 1) throw DataError("l2_normalize expects rank-1 input");
    return normalize_impl(v, 1, v.numel(), min_norm);
}

Tensor l2_normalize_rows(const Tensor& m, float min_norm) {
    if (m.rank() != 2) throw DataError("l2_normalize_rows expects rank-2 input");
    return normalize_impl(m, m.dim(0), m.dim(1), min_norm);
}

Tensor mse_mean(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DataError("mse_mean shape mismatch: " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
    const auto& x = a.data();
    const auto& y = b.data();
    const float inv_n = 1.0f / static_cast<float>(a.numel());
    double acc = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double d = static_cast<double>(x[i]) - y[i];
        acc += d * d;
    }
    auto ai = a.impl();
    auto bi = b.impl();
    return make_result({1}, {static_cast<float>(acc * inv_n)}, {ai, bi},
                       [ai, bi, inv_n](const std::vector<float>& g,
                                       const std::vector<std::vector<float>*>& pg) {
                           const float scale = 2.0f * inv_n * g[0];
                           for (size_t i = 0; i < ai->data.size(); ++i) {
                               const float d = (ai->data[i] - bi->data[i]) * scale;
                               if (pg[0]) (*pg[0])[i] += d;
                               if (pg[1]) (*pg[1])[i] -= d;
                           }
                       });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    const Tensor l2 = logits.rank() == 1 ? reshape(logits, {1, logits.numel()}) : logits;
    if (l2.rank() != 2) throw DataError("cross_entropy expects rank-1 or rank-2 logits");
    const int m = l2.dim(0), c = l2.dim(1);
    if (static_cast<int>(labels.size()) != m)
        throw DataError("cross_entropy needs one label per row");
    for (int lab : labels)
        if (lab < 0 || lab >= c)
            throw DataError("cross_entropy label " + std::to_string(lab) +
                            " out of range [0," + std::to_string(c) + ")");
    const auto& x = l2.data();
    std::vector<float> probs(x.size());
    double loss = 0.0;
    for (int i = 0; i < m; ++i) {
        const size_t off = static_cast<size_t>(i) * c;
        const float mx = *std::max_element(x.begin() + off, x.begin() + off + c);
        double denom = 0.0;
        for (int j = 0; j < c; ++j) {
            probs[off + j] = std::exp(x[off + j] - mx);
            denom += probs[off + j];
        }
        for (int j = 0; j < c; ++j)
            probs[off + j] = static_cast<float>(probs[off + j] / denom);
        loss += std::log(denom) - (x[off + labels[i]] - mx);
    }
    loss /= m;
    std::vector<int> labs(labels.begin(), labels.end());
    return make_result({1}, {static_cast<float>(loss)}, {l2.impl()},
                       [m, c, probs = std::move(probs), labs = std::move(labs)](
                           const std::vector<float>& g,
                           const std::vector<std::vector<float>*>& pg) {
                           if (!pg[0]) return;
                           const float scale = g[0] / static_cast<float>(m);
                           for (int i = 0; i < m; ++i) {
                               const size_t off = static_cast<size_t>(i) * c;
                               for (int j = 0; j < c; ++j) {
                                   float d = probs[off + j];
                                   if (j == labs[i]) d -= 1.0f;
                                   (*pg[0])[off + j] += d * scale;
                               }
                           }
                       });
}

Tensor linear_nt(const Tensor& x, const Tensor& w) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
        throw DataError("linear_nt shape mismatch: " + shape_str(x.shape()) + " vs " +
                        shape_str(w.shape()));
    const int m = x.dim(0), d = x.dim(1), c = w.dim(0);
    const auto& xv = x.data();
    const auto& wv = w.data();
    std::vector<float> out(static_cast<size_t>(m) * c, 0.0f);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j) {
            double acc = 0.0;
            for (int k = 0; k < d; ++k)
                acc += static_cast<double>(xv[static_cast<size_t>(i) * d + k]) *
                       wv[static_cast<size_t>(j) * d + k];
            out[static_cast<size_t>(i) * c + j] = static_cast<float>(acc);
        }
    auto xi = x.impl();
    auto wi = w.impl();
    return make_result({m, c}, std::move(out), {xi, wi},
                       [xi, wi, m, d, c](const std::vector<float>& g,
                                         const std::vector<std::vector<float>*>& pg) {
                           const auto& xv = xi->data;
                           const auto& wv = wi->data;
                           for (int i = 0; i < m; ++i)
                               for (int j = 0; j < c; ++j) {
                                   const float go = g[static_cast<size_t>(i) * c + j];
                                   if (go == 0.0f) continue;
                                   for (int k = 0; k < d; ++k) {
                                       if (pg[0])
                                           (*pg[0])[static_cast<size_t>(i) * d + k] +=
                                               go * wv[static_cast<size_t>(j) * d + k];
                                       if (pg[1])
                                           (*pg[1])[static_cast<size_t>(j) * d + k] +=
                                               go * xv[static_cast<size_t>(i) * d + k];
                                   }
                               }
                       });
}

Tensor row(const Tensor& m, int i) {
    if (m.rank() != 2) throw DataError("row expects rank-2 input");
    if (i < 0 || i >= m.dim(0)) throw DataError("row index out of range");
    const int cols = m.dim(1);
    std::vector<float> out(m.data().begin() + static_cast<size_t>(i) * cols,
                           m.data().begin() + static_cast<size_t>(i + 1) * cols);
    return make_result({cols}, std::move(out), {m.impl()},
                       [i, cols](const std::vector<float>& g,
                                 const std::vector<std::vector<float>*>& pg) {
                           if (pg[0])
                               for (int j = 0; j < cols; ++j)
                                   (*pg[0])[static_cast<size_t>(i) * cols + j] += g[j];
                       });
}

Tensor sum(const Tensor& t) {
    double acc = 0.0;
    for (float v : t.data()) acc += v;
    return make_result({1}, {static_cast<float>(acc)}, {t.impl()},
                       [](const std::vector<float>& g,
                          const std::vector<std::vector<float>*>& pg) {
                           if (pg[0])
                               for (auto& d : *pg[0]) d += g[0];
                       });
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) throw DataError("global_avg_pool expects rank-4 input");
    const int n = x.dim(0), c = x.dim(1);
    const long hw = static_cast<long>(x.dim(2)) * x.dim(3);
    const auto& xv = x.data();
    std::vector<float> out(static_cast<size_t>(n) * c);
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const size_t off = (static_cast<size_t>(b) * c + ch) * hw;
            double acc = 0.0;
            for (long i = 0; i < hw; ++i) acc += xv[off + i];
            out[static_cast<size_t>(b) * c + ch] = static_cast<float>(acc / hw);
        }
    return make_result({n, c}, std::move(out), {x.impl()},
                       [n, c, hw](const std::vector<float>& g,
                                  const std::vector<std::vector<float>*>& pg) {
                           if (!pg[0]) return;
                           const float inv = 1.0f / static_cast<float>(hw);
                           for (int b = 0; b < n; ++b)
                               for (int ch = 0; ch < c; ++ch) {
                                   const float go = g[static_cast<size_t>(b) * c + ch] * inv;
                                   const size_t off = (static_cast<size_t>(b) * c + ch) * hw;
                                   for (long i = 0; i < hw; ++i) (*pg[0])[off + i] += go;
                               }
                       });
}

Tensor reshape(const Tensor& t, std::vector<int> new_shape) {
    if (product(new_shape) != t.numel())
        throw DataError("reshape to " + shape_str(new_shape) + " changes element count of " +
                        shape_str(t.shape()));
    std::vector<float> out = t.data();
    return make_result(std::move(new_shape), std::move(out), {t.impl()},
                       [](const std::vector<float>& g,
                          const std::vector<std::vector<float>*>& pg) {
                           if (pg[0])
                               for (size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                       });
}

Tensor arcface_logits(const Tensor& cosines, std::span<const int> labels, float s, float m) {
    if (cosines.rank() != 2) throw DataError("arcface_logits expects rank-2 cosines");
    const int rows = cosines.dim(0), cols = cosines.dim(1);
    if (static_cast<int>(labels.size()) != rows)
        throw DataError("arcface_logits needs one label per row");
    constexpr float kCosEps = 1e-7f;
    const float theta_max = static_cast<float>(M_PI) - m - 1e-6f;
    const auto& x = cosines.data();
    std::vector<float> out(x.size());
    // per-target derivative d(out)/d(cos); 0 where a clamp was active
    std::vector<float> dtarget(rows, 0.0f);
    for (int i = 0; i < rows; ++i) {
        const size_t off = static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) out[off + j] = s * x[off + j];
        const int y = labels[i];
        if (y < 0 || y >= cols) throw DataError("arcface_logits label out of range");
        const float cy = x[off + y];
        const bool cos_clamped = cy >= 1.0f - kCosEps || cy <= -1.0f + kCosEps;
        const float cc = std::clamp(cy, -1.0f + kCosEps, 1.0f - kCosEps);
        float theta = std::acos(cc);
        const bool theta_clamped = theta > theta_max;
        theta = std::min(theta, theta_max);
        out[off + y] = s * std::cos(theta + m);
        if (!cos_clamped && !theta_clamped)
            dtarget[i] = s * std::sin(theta + m) / std::sin(theta);
    }
    std::vector<int> labs(labels.begin(), labels.end());
    return make_result(cosines.shape(), std::move(out), {cosines.impl()},
                       [rows, cols, s, labs = std::move(labs), dtarget = std::move(dtarget)](
                           const std::vector<float>& g,
                           const std::vector<std::vector<float>*>& pg) {
                           if (!pg[0]) return;
                           for (int i = 0; i < rows; ++i) {
                               const size_t off = static_cast<size_t>(i) * cols;
                               for (int j = 0; j < cols; ++j)
                                   (*pg[0])[off + j] +=
                                       g[off + j] * (j == labs[i] ? dtarget[i] : s);
                           }
                       });
}

// ---------------------------------------------------------------------------
// Parameters and optimizers
// ---------------------------------------------------------------------------

ParamPtr make_param(std::string name, Tensor value) {
    auto p = std::make_shared<Parameter>();
    if (!value.requires_grad()) {
        // leaves always carry gradients
        value = Tensor::from_data(value.shape(), value.data(), true);
    }
    p->value = std::move(value);
    p->name = std::move(name);
    return p;
}

void zero_grads(std::span<const ParamPtr> params) {
    for (const auto& p : params) p->value.zero_grad();
}

void sgd_step(std::span<const ParamPtr> params, float lr, float momentum,
              float weight_decay) {
    if (lr <= 0.0f) throw UsageError("sgd_step learning rate must be > 0");
    for (const auto& p : params) {
        auto& w = p->value.data();
        const auto& g = p->value.grad();
        if (p->momentum_buffer.size() != w.size()) p->momentum_buffer.assign(w.size(), 0.0f);
        auto& v = p->momentum_buffer;
        for (size_t i = 0; i < w.size(); ++i) {
            v[i] = momentum * v[i] + (g[i] + weight_decay * w[i]);
            w[i] -= lr * v[i];
        }
    }
}

AdamOptimizer::AdamOptimizer(std::vector<ParamPtr> params, float beta1, float beta2,
                             float weight_decay, float eps)
    : params_(std::move(params)),
      beta1_(beta1),
      beta2_(beta2),
      weight_decay_(weight_decay),
      eps_(eps) {
    exp_avg_.resize(params_.size());
    exp_avg_sq_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        const size_t n = params_[i]->value.data().size();
        exp_avg_[i].assign(n, 0.0f);
        exp_avg_sq_[i].assign(n, 0.0f);
    }
}

void AdamOptimizer::step(float lr) {
    if (lr < 0.0f) throw UsageError("adam step learning rate must be >= 0");
    ++step_count_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), step_count_);
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), step_count_);
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& w = params_[i]->value.data();
        const auto& g = params_[i]->value.grad();
        auto& m = exp_avg_[i];
        auto& v = exp_avg_sq_[i];
        for (size_t j = 0; j < w.size(); ++j) {
            const float gj = g[j] + weight_decay_ * w[j];
            m[j] = beta1_ * m[j] + (1.0f - beta1_) * gj;
            v[j] = beta2_ * v[j] + (1.0f - beta2_) * gj * gj;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps_));
        }
    }
}

}  // namespace pocketnet
