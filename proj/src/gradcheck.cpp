#include "pocketnet/gradcheck.hpp"

#include <cmath>
#include <functional>

#include "pocketnet/losses.hpp"
#include "pocketnet/search_space.hpp"
#include "pocketnet/tensor.hpp"

namespace pocketnet {

namespace {

// Shuffled evenly-spaced grid covering about [-1.8, 1.8]: all values distinct,
// pairwise separation and distance from zero far above the FD step. Keeps
// kinked ops (max pool, prelu) away from their non-differentiable sets.
Tensor spaced_random(std::vector<int> shape, Rng& rng) {
    long n = 1;
    for (int d : shape) n *= d;
    const float spacing = 3.6f / static_cast<float>(n);
    std::vector<float> v(n);
    for (long i = 0; i < n; ++i)
        v[i] = -1.8f + spacing * (static_cast<float>(i) + 0.5f);
    rng.shuffle(v);
    return Tensor::from_data(std::move(shape), std::move(v), true);
}

Tensor uniform_tensor(std::vector<int> shape, Rng& rng, float lo, float hi,
                      bool requires_grad = true) {
    long n = 1;
    for (int d : shape) n *= d;
    std::vector<float> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

struct Case {
    std::vector<Tensor> leaves;
    std::function<Tensor()> forward;
};

double l2_rel_err(const std::vector<float>& analytic, const std::vector<double>& fd) {
    double na = 0.0, nf = 0.0, nd = 0.0;
    for (size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i];
        const double f = fd[i];
        na += a * a;
        nf += f * f;
        nd += (a - f) * (a - f);
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nf), 1e-12});
    return std::sqrt(nd) / denom;
}

// Worst L2-relative error across the case's leaves.
double check_case(Case& c, Rng& cot_rng, double h) {
    Tensor out = c.forward();
    std::vector<float> cot(out.numel());
    for (auto& x : cot) x = cot_rng.uniform(-1.0f, 1.0f);

    for (auto& leaf : c.leaves) leaf.zero_grad();
    backward_with_cotangent(out, cot);
    std::vector<std::vector<float>> analytic;
    for (auto& leaf : c.leaves) analytic.push_back(leaf.grad());

    auto functional = [&]() {
        NoGradGuard guard;
        Tensor y = c.forward();
        double acc = 0.0;
        for (int i = 0; i < y.numel(); ++i)
            acc += static_cast<double>(cot[i]) * y.data()[i];
        return acc;
    };

    double worst = 0.0;
    for (size_t l = 0; l < c.leaves.size(); ++l) {
        auto& values = c.leaves[l].data();
        std::vector<double> fd(values.size());
        for (size_t i = 0; i < values.size(); ++i) {
            const float saved = values[i];
            values[i] = saved + static_cast<float>(h);
            const double up = functional();
            values[i] = saved - static_cast<float>(h);
            const double down = functional();
            values[i] = saved;
            fd[i] = (up - down) / (2.0 * h);
        }
        worst = std::max(worst, l2_rel_err(analytic[l], fd));
    }
    return worst;
}

using CaseBuilder = std::function<Case(Rng&)>;

Case conv_case(Rng& rng, std::vector<int> xshape, std::vector<int> wshape, int stride,
               int padding, int groups) {
    Case c;
    auto x = uniform_tensor(xshape, rng, -1.0f, 1.0f);
    auto w = uniform_tensor(wshape, rng, -0.8f, 0.8f);
    c.leaves = {x, w};
    c.forward = [=] { return conv2d(x, w, stride, padding, groups); };
    return c;
}

std::vector<std::pair<std::string, CaseBuilder>> make_cases() {
    std::vector<std::pair<std::string, CaseBuilder>> cases;

    cases.emplace_back("conv2d_3x3", [](Rng& rng) {
        return conv_case(rng, {1, 4, 5, 5}, {4, 4, 3, 3}, 1, 1, 1);
    });
    cases.emplace_back("conv2d_stride2", [](Rng& rng) {
        return conv_case(rng, {1, 3, 6, 6}, {5, 3, 3, 3}, 2, 1, 1);
    });
    cases.emplace_back("conv2d_grouped", [](Rng& rng) {
        return conv_case(rng, {2, 4, 5, 5}, {6, 2, 3, 3}, 1, 1, 2);
    });
    cases.emplace_back("conv2d_depthwise", [](Rng& rng) {
        return conv_case(rng, {1, 4, 6, 6}, {4, 1, 3, 3}, 1, 1, 4);
    });
    cases.emplace_back("conv2d_1x1", [](Rng& rng) {
        return conv_case(rng, {2, 5, 4, 4}, {7, 5, 1, 1}, 1, 0, 1);
    });

    cases.emplace_back("batchnorm_train", [](Rng& rng) {
        Case c;
        auto x = uniform_tensor({2, 3, 4, 4}, rng, -1.0f, 1.0f);
        auto scale = uniform_tensor({3}, rng, 0.5f, 1.5f);
        auto shift = uniform_tensor({3}, rng, -0.5f, 0.5f);
        c.leaves = {x, scale, shift};
        c.forward = [=] {
            auto stats = RunningStats::make(3);
            return batchnorm2d(x, scale, shift, stats, BnMode::train);
        };
        return c;
    });
    cases.emplace_back("batchnorm_eval", [](Rng& rng) {
        Case c;
        auto x = uniform_tensor({2, 3, 4, 4}, rng, -1.0f, 1.0f);
        auto scale = uniform_tensor({3}, rng, 0.5f, 1.5f);
        auto shift = uniform_tensor({3}, rng, -0.5f, 0.5f);
        auto stats = RunningStats::make(3);
        for (auto& v : stats.mean) v = rng.uniform(-0.5f, 0.5f);
        for (auto& v : stats.var) v = rng.uniform(0.5f, 1.5f);
        c.leaves = {x, scale, shift};
        c.forward = [=]() mutable {
            return batchnorm2d(x, scale, shift, stats, BnMode::eval);
        };
        return c;
    });

    cases.emplace_back("prelu", [](Rng& rng) {
        Case c;
        auto x = spaced_random({2, 4, 3, 3}, rng);
        auto slope = uniform_tensor({4}, rng, 0.1f, 0.9f);
        c.leaves = {x, slope};
        c.forward = [=] { return prelu(x, slope); };
        return c;
    });

    for (auto [name, kind, stride] :
         {std::tuple{"max_pool_s1", PoolKind::max, 1}, {"max_pool_s2", PoolKind::max, 2},
          {"avg_pool_s1", PoolKind::avg, 1}, {"avg_pool_s2", PoolKind::avg, 2}}) {
        cases.emplace_back(name, [kind, stride](Rng& rng) {
            Case c;
            auto x = spaced_random({1, 3, 6, 6}, rng);
            c.leaves = {x};
            c.forward = [=] { return pool2d(x, kind, 3, stride, 1); };
            return c;
        });
    }

    cases.emplace_back("add_mul_scalar", [](Rng& rng) {
        Case c;
        auto a = uniform_tensor({2, 6}, rng, -1.0f, 1.0f);
        auto b = uniform_tensor({2, 6}, rng, -1.0f, 1.0f);
        c.leaves = {a, b};
        c.forward = [=] { return scalar_mul(add(mul(a, b), a), 0.7f); };
        return c;
    });

    cases.emplace_back("weighted_sum", [](Rng& rng) {
        Case c;
        auto x0 = uniform_tensor({2, 5}, rng, -1.0f, 1.0f);
        auto x1 = uniform_tensor({2, 5}, rng, -1.0f, 1.0f);
        auto x2 = uniform_tensor({2, 5}, rng, -1.0f, 1.0f);
        auto w = uniform_tensor({3}, rng, -1.0f, 1.0f);
        c.leaves = {x0, x1, x2, w};
        c.forward = [=] {
            std::vector<Tensor> xs{x0, x1, x2};
            return weighted_sum(xs, w);
        };
        return c;
    });

    cases.emplace_back("concat_channels", [](Rng& rng) {
        Case c;
        auto a = uniform_tensor({1, 2, 3, 3}, rng, -1.0f, 1.0f);
        auto b = uniform_tensor({1, 3, 3, 3}, rng, -1.0f, 1.0f);
        c.leaves = {a, b};
        c.forward = [=] {
            std::vector<Tensor> xs{a, b};
            return concat_channels(xs);
        };
        return c;
    });

    cases.emplace_back("softmax", [](Rng& rng) {
        Case c;
        auto x = uniform_tensor({8}, rng, -3.0f, 3.0f);
        c.leaves = {x};
        c.forward = [=] { return softmax(x); };
        return c;
    });
    cases.emplace_back("log", [](Rng& rng) {
        Case c;
        auto x = uniform_tensor({10}, rng, 0.2f, 3.0f);
        c.leaves = {x};
        c.forward = [=] { return log(x); };
        return c;
    });
    cases.emplace_back("exp", [](Rng& rng) {
        Case c;
        auto x = uniform_tensor({10}, rng, -2.0f, 2.0f);
        c.leaves = {x};
        c.forward = [=] { return exp(x); };
        return c;
    });

    cases.emplace_back("l2_normalize", [](Rng& rng) {
        Case c;
        auto x = uniform_tensor({6}, rng, 0.3f, 1.5f);
        c.leaves = {x};
        c.forward = [=] { return l2_normalize(x); };
        return c;
    });
    cases.emplace_back("l2_normalize_rows", [](Rng& rng) {
        Case c;
        auto x = uniform_tensor({3, 5}, rng, 0.3f, 1.5f);
        c.leaves = {x};
        c.forward = [=] { return l2_normalize_rows(x); };
        return c;
    });

    cases.emplace_back("mse_mean", [](Rng& rng) {
        Case c;
        auto a = uniform_tensor({2, 6}, rng, -1.0f, 1.0f);
        auto b = uniform_tensor({2, 6}, rng, -1.0f, 1.0f);
        c.leaves = {a, b};
        c.forward = [=] { return mse_mean(a, b); };
        return c;
    });

    cases.emplace_back("cross_entropy", [](Rng& rng) {
        Case c;
        auto logits = uniform_tensor({4, 5}, rng, -2.0f, 2.0f);
        std::vector<int> labels(4);
        for (auto& l : labels) l = static_cast<int>(rng.uniform_int(5));
        c.leaves = {logits};
        c.forward = [=] { return cross_entropy(logits, labels); };
        return c;
    });

    cases.emplace_back("linear_nt", [](Rng& rng) {
        Case c;
        auto x = uniform_tensor({3, 4}, rng, -1.0f, 1.0f);
        auto w = uniform_tensor({6, 4}, rng, -1.0f, 1.0f);
        c.leaves = {x, w};
        c.forward = [=] { return linear_nt(x, w); };
        return c;
    });

    cases.emplace_back("global_avg_pool", [](Rng& rng) {
        Case c;
        auto x = uniform_tensor({2, 3, 4, 4}, rng, -1.0f, 1.0f);
        c.leaves = {x};
        c.forward = [=] { return global_avg_pool(x); };
        return c;
    });

    cases.emplace_back("row_softmax", [](Rng& rng) {
        Case c;
        auto m = uniform_tensor({3, 8}, rng, -2.0f, 2.0f);
        c.leaves = {m};
        c.forward = [=] { return softmax(row(m, 1)); };
        return c;
    });

    cases.emplace_back("reshape_sum", [](Rng& rng) {
        Case c;
        auto x = uniform_tensor({2, 6}, rng, -1.0f, 1.0f);
        c.leaves = {x};
        c.forward = [=] { return sum(reshape(x, {3, 4})); };
        return c;
    });

    cases.emplace_back("arcface_loss", [](Rng& rng) {
        // redraw until cosines stay clear of the acos clamp region
        Case c;
        Rng local(rng.next_u32());
        Tensor emb, cen;
        for (int attempt = 0; attempt < 64; ++attempt) {
            emb = Tensor::randn({4, 5}, local, 1.0f, true);
            cen = Tensor::randn({3, 5}, local, 1.0f, true);
            bool ok = true;
            for (int i = 0; i < 4 && ok; ++i)
                for (int j = 0; j < 3 && ok; ++j) {
                    double de = 0, dc = 0, dd = 0;
                    for (int k = 0; k < 5; ++k) {
                        const double e = emb.data()[i * 5 + k];
                        const double w = cen.data()[j * 5 + k];
                        de += e * e;
                        dc += w * w;
                        dd += e * w;
                    }
                    const double cosv = dd / std::sqrt(de * dc);
                    if (std::abs(cosv) > 0.9 || de < 0.25 || dc < 0.25) ok = false;
                }
            if (ok) break;
        }
        auto head = ArcFaceHead::make(3, 5, 8.0f, 0.3f, local);
        head.centers->value = cen;
        std::vector<int> labels(4);
        for (auto& l : labels) l = static_cast<int>(local.uniform_int(3));
        c.leaves = {emb, cen};
        c.forward = [=]() mutable { return arcface_loss(emb, labels, head); };
        return c;
    });

    cases.emplace_back("combined_loss", [](Rng& rng) {
        Case c;
        Rng local(rng.next_u32());
        auto emb = uniform_tensor({3, 6}, rng, 0.2f, 1.2f);
        auto teacher = uniform_tensor({3, 6}, rng, 0.2f, 1.2f, false);
        auto head = ArcFaceHead::make(4, 6, 8.0f, 0.3f, local);
        std::vector<int> labels(3);
        for (auto& l : labels) l = static_cast<int>(local.uniform_int(4));
        c.leaves = {emb};
        c.forward = [=]() mutable {
            LossConfig cfg{2.0f, KdMode::converged};
            Tensor arc = arcface_loss(emb, labels, head);
            Tensor mse = embed_mse(l2_normalize_rows(emb), l2_normalize_rows(teacher));
            return combined_loss(arc, mse, cfg);
        };
        return c;
    });

    cases.emplace_back("mixed_forward", [](Rng& rng) {
        Case c;
        Rng build(rng.next_u32());
        auto mixed = std::make_shared<MixedOp>(MixedOp::make(4, 1, "m", build));
        auto x = spaced_random({1, 4, 6, 6}, rng);
        auto alpha = uniform_tensor({kNumOps}, rng, -1.0f, 1.0f);
        c.leaves = {x, alpha};
        c.forward = [=] { return mixed->forward(alpha, x, false); };
        return c;
    });

    cases.emplace_back("two_layer_composition", [](Rng& rng) {
        Case c;
        auto x = uniform_tensor({2, 3, 5, 5}, rng, -1.0f, 1.0f);
        auto w1 = uniform_tensor({4, 3, 3, 3}, rng, -0.6f, 0.6f);
        auto scale = uniform_tensor({4}, rng, 0.5f, 1.5f);
        auto shift = uniform_tensor({4}, rng, -0.3f, 0.3f);
        auto w2 = uniform_tensor({3, 100}, rng, -0.5f, 0.5f);
        std::vector<int> labels{0, 2};
        c.leaves = {x, w1, scale, shift, w2};
        c.forward = [=] {
            auto stats = RunningStats::make(4);
            Tensor h = conv2d(x, w1, 1, 1, 1);
            h = batchnorm2d(h, scale, shift, stats, BnMode::train);
            Tensor feat = reshape(h, {2, 100});
            return cross_entropy(linear_nt(feat, w2), labels);
        };
        return c;
    });

    return cases;
}

}  // namespace

std::vector<GradCheckResult> run_gradient_suite(int seeds_per_op, double tolerance,
                                                double step) {
    std::vector<GradCheckResult> results;
    for (auto& [name, builder] : make_cases()) {
        GradCheckResult r;
        r.op = name;
        r.seeds = seeds_per_op;
        for (int s = 0; s < seeds_per_op; ++s) {
            Rng rng(0x9e3779b9u + 7919u * static_cast<uint64_t>(s) + std::hash<std::string>{}(name));
            Case c = builder(rng);
            Rng cot_rng(0x51ed2701u + s);
            r.worst_rel_err = std::max(r.worst_rel_err, check_case(c, cot_rng, step));
        }
        r.pass = r.worst_rel_err < tolerance;
        results.push_back(std::move(r));
    }
    return results;
}

bool gradient_suite_passed(const std::vector<GradCheckResult>& results) {
    for (const auto& r : results)
        if (!r.pass) return false;
    return !results.empty();
}

}  // namespace pocketnet
