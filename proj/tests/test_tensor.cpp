// Unit tests for the tensor/autograd core: forward semantics, analytic
// gradients against test-local oracles, and optimizer behavior.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "pocketnet/tensor.hpp"

using namespace pocketnet;

namespace {

Tensor t4(int n, int c, int h, int w, std::vector<float> v, bool rg = false) {
    return Tensor::from_data({n, c, h, w}, std::move(v), rg);
}

// naive per-channel 2-D correlation, the depthwise oracle
std::vector<float> naive_depthwise(const std::vector<float>& x, const std::vector<float>& w,
                                   int c, int h, int wd, int k, int stride, int pad) {
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (wd + 2 * pad - k) / stride + 1;
    std::vector<float> out(static_cast<size_t>(c) * ho * wo, 0.0f);
    for (int ch = 0; ch < c; ++ch)
        for (int oh = 0; oh < ho; ++oh)
            for (int ow = 0; ow < wo; ++ow) {
                float acc = 0.0f;
                for (int r = 0; r < k; ++r)
                    for (int cc = 0; cc < k; ++cc) {
                        const int ih = oh * stride - pad + r;
                        const int iw = ow * stride - pad + cc;
                        if (ih < 0 || ih >= h || iw < 0 || iw >= wd) continue;
                        acc += x[(static_cast<size_t>(ch) * h + ih) * wd + iw] *
                               w[(static_cast<size_t>(ch) * k + r) * k + cc];
                    }
                out[(static_cast<size_t>(ch) * ho + oh) * wo + ow] = acc;
            }
    return out;
}

}  // namespace

TEST_CASE("conv2d scalar case: out = x*w, d(out)/dw = x") {
    auto x = t4(1, 1, 1, 1, {3.0f});
    auto w = t4(1, 1, 1, 1, {0.5f}, true);
    auto out = conv2d(x, w, 1, 0, 1);
    CHECK(out.numel() == 1);
    CHECK(out.data()[0] == doctest::Approx(1.5f));
    backward(sum(out));
    CHECK(w.grad()[0] == doctest::Approx(3.0f));
}

TEST_CASE("conv2d stem rule: 4x4 input, k3 s2 p1 -> 2x2") {
    Rng rng(7);
    auto x = Tensor::randn({1, 3, 4, 4}, rng);
    auto w = Tensor::randn({8, 3, 3, 3}, rng);
    auto out = conv2d(x, w, 2, 1, 1);
    CHECK(out.shape() == std::vector<int>{1, 8, 2, 2});
}

TEST_CASE("conv2d rejects bad shapes with a diagnostic") {
    Rng rng(1);
    auto x = Tensor::randn({1, 4, 5, 5}, rng);
    auto w = Tensor::randn({4, 3, 3, 3}, rng);
    CHECK_THROWS_AS(conv2d(x, w, 1, 1, 1), DataError);
    auto w2 = Tensor::randn({4, 4, 3, 3}, rng);
    CHECK_THROWS_AS(conv2d(x, w2, 1, 1, 3), DataError);  // groups not dividing
}

TEST_CASE("depthwise conv matches naive quadruple loop") {
    Rng rng(42);
    for (int trial = 0; trial < 5; ++trial) {
        const int c = 3, h = 6, wd = 5, k = 3;
        auto x = Tensor::randn({1, c, h, wd}, rng);
        auto w = Tensor::randn({c, 1, k, k}, rng);
        for (int stride : {1, 2}) {
            auto out = conv2d(x, w, stride, 1, c);
            auto ref = naive_depthwise(x.data(), w.data(), c, h, wd, k, stride, 1);
            REQUIRE(out.data().size() == ref.size());
            for (size_t i = 0; i < ref.size(); ++i)
                CHECK(out.data()[i] == doctest::Approx(ref[i]).epsilon(1e-5));
        }
    }
}

TEST_CASE("batchnorm2d: zero input stays zero, train stats are normalized") {
    auto scale = Tensor::full({3}, 1.0f, true);
    auto shift = Tensor::zeros({3}, true);
    auto stats = RunningStats::make(3);

    // constant-zero input: x - mean is zero everywhere, so output is zero
    auto zeros = Tensor::zeros({2, 3, 4, 4});
    auto z0 = batchnorm2d(zeros, scale, shift, stats, BnMode::train);
    for (float val : z0.data()) CHECK(val == doctest::Approx(0.0f));
    stats = RunningStats::make(3);
    Rng rng(3);
    auto x = Tensor::randn({2, 3, 4, 4}, rng);
    auto y = batchnorm2d(x, scale, shift, stats, BnMode::train);
    for (int ch = 0; ch < 3; ++ch) {
        double m = 0.0, v = 0.0;
        for (int b = 0; b < 2; ++b)
            for (int i = 0; i < 16; ++i) m += y.data()[(b * 3 + ch) * 16 + i];
        m /= 32.0;
        for (int b = 0; b < 2; ++b)
            for (int i = 0; i < 16; ++i) {
                const double d = y.data()[(b * 3 + ch) * 16 + i] - m;
                v += d * d;
            }
        v /= 32.0;
        CHECK(std::abs(m) < 1e-4);
        CHECK(std::abs(v - 1.0) < 1e-3);
    }
    // constant-zero input through eval mode with identity affine stays zero
    auto stats2 = RunningStats::make(3);
    auto z = batchnorm2d(zeros, scale, shift, stats2, BnMode::eval);
    for (float val : z.data()) CHECK(val == doctest::Approx(0.0f));
}

TEST_CASE("batchnorm2d rejects single-value channels in train mode") {
    auto scale = Tensor::full({2}, 1.0f, true);
    auto shift = Tensor::zeros({2}, true);
    auto stats = RunningStats::make(2);
    auto x = Tensor::full({1, 2, 1, 1}, 0.5f);
    CHECK_THROWS_AS(batchnorm2d(x, scale, shift, stats, BnMode::train), DataError);
}

TEST_CASE("prelu identities") {
    auto slope = Tensor::from_data({2}, {0.3f, 0.7f}, true);
    auto x = t4(1, 2, 2, 2, {0.1f, 0.5f, 2.0f, 0.0f, 1.0f, 0.2f, 0.3f, 4.0f});
    auto y = prelu(x, slope);
    for (int i = 0; i < 8; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));

    auto ones = Tensor::full({2}, 1.0f, true);
    auto xm = t4(1, 2, 2, 2, {-1.0f, 2.0f, -0.5f, 0.25f, 3.0f, -2.0f, 0.0f, -0.1f});
    auto ym = prelu(xm, ones);
    for (int i = 0; i < 8; ++i) CHECK(ym.data()[i] == doctest::Approx(xm.data()[i]));

    CHECK_THROWS_AS(prelu(xm, Tensor::full({3}, 1.0f, true)), DataError);
}

TEST_CASE("pool2d basics") {
    auto c = Tensor::full({1, 1, 4, 4}, 2.5f);
    auto mx = pool2d(c, PoolKind::max, 3, 1, 1);
    auto av = pool2d(c, PoolKind::avg, 3, 1, 1);
    CHECK(mx.shape() == c.shape());
    for (float v : mx.data()) CHECK(v == doctest::Approx(2.5f));
    // center of avg pool sees the full window
    CHECK(av.data()[5] == doctest::Approx(2.5f));

    std::vector<float> v(9);
    std::iota(v.begin(), v.end(), 1.0f);
    auto g = t4(1, 1, 3, 3, v);
    auto m = pool2d(g, PoolKind::max, 3, 1, 1);
    CHECK(m.data()[4] == doctest::Approx(9.0f));  // center
}

TEST_CASE("softmax, l2_normalize, mse examples") {
    auto s = softmax(Tensor::from_data({2}, {0.0f, 0.0f}));
    CHECK(s.data()[0] == doctest::Approx(0.5f));
    CHECK(s.data()[1] == doctest::Approx(0.5f));

    auto n = l2_normalize(Tensor::from_data({2}, {3.0f, 4.0f}));
    CHECK(n.data()[0] == doctest::Approx(0.6f));
    CHECK(n.data()[1] == doctest::Approx(0.8f));

    CHECK_THROWS_AS(l2_normalize(Tensor::from_data({2}, {0.0f, 0.0f})), NumericError);

    auto a = Tensor::from_data({4}, {1.0f, 0.0f, 0.0f, 0.0f});
    auto b = Tensor::from_data({4}, {0.0f, 1.0f, 0.0f, 0.0f});
    CHECK(mse_mean(a, b).item() == doctest::Approx(0.5f));
}

TEST_CASE("softmax is a probability vector for inputs in [-50, 50]") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<float> v(8);
        for (auto& x : v) x = rng.uniform(-50.0f, 50.0f);
        auto s = softmax(Tensor::from_data({8}, v));
        double total = 0.0;
        for (float x : s.data()) {
            CHECK(x >= 0.0f);
            total += x;
        }
        CHECK(std::abs(total - 1.0) < 1e-6);
    }
}

TEST_CASE("concat_channels rejects mismatched non-channel dims") {
    Rng rng(5);
    auto a = Tensor::randn({1, 2, 4, 4}, rng);
    auto b = Tensor::randn({1, 3, 4, 4}, rng);
    auto c = Tensor::randn({1, 2, 3, 4}, rng);
    std::vector<Tensor> ok{a, b};
    auto cat = concat_channels(ok);
    CHECK(cat.shape() == std::vector<int>{1, 5, 4, 4});
    std::vector<Tensor> bad{a, c};
    CHECK_THROWS_AS(concat_channels(bad), DataError);
}

TEST_CASE("backward: sum of a parameter gives all-ones grad") {
    auto p = make_param("w", Tensor::from_data({3}, {0.5f, -1.0f, 2.0f}));
    auto loss = sum(p->value);
    backward(loss);
    for (float g : p->value.grad()) CHECK(g == doctest::Approx(1.0f));
}

TEST_CASE("backward: mse(w, w) gives zero grads") {
    auto p = make_param("w", Tensor::from_data({4}, {1.0f, 2.0f, 3.0f, 4.0f}));
    auto loss = mse_mean(p->value, p->value);
    backward(loss);
    CHECK(loss.item() == doctest::Approx(0.0f));
    for (float g : p->value.grad()) CHECK(g == doctest::Approx(0.0f));
}

TEST_CASE("backward rejects non-scalar outputs and accumulates across calls") {
    auto p = make_param("w", Tensor::from_data({2}, {1.0f, 2.0f}));
    auto y = scalar_mul(p->value, 2.0f);
    CHECK_THROWS_AS(backward(y), UsageError);
    auto loss = sum(y);
    backward(loss);
    backward(loss);
    for (float g : p->value.grad()) CHECK(g == doctest::Approx(4.0f));  // 2 + 2
}

TEST_CASE("NoGradGuard suppresses graph recording") {
    auto p = make_param("w", Tensor::from_data({2}, {1.0f, 2.0f}));
    NoGradGuard guard;
    auto y = scalar_mul(p->value, 3.0f);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("sgd_step basics") {
    auto p = make_param("w", Tensor::from_data({1}, {1.0f}));
    p->value.grad()[0] = 1.0f;
    std::vector<ParamPtr> ps{p};
    sgd_step(ps, 0.1f, 0.0f, 0.0f);
    CHECK(p->value.data()[0] == doctest::Approx(0.9f));

    // decay-only: g = 0, wd > 0 -> update is -lr * wd * w (momentum 0)
    auto q = make_param("q", Tensor::from_data({1}, {2.0f}));
    q->value.zero_grad();
    std::vector<ParamPtr> qs{q};
    sgd_step(qs, 0.1f, 0.0f, 0.5f);
    CHECK(q->value.data()[0] == doctest::Approx(2.0f - 0.1f * 0.5f * 2.0f));

    CHECK_THROWS_AS(sgd_step(ps, 0.0f, 0.9f, 0.0f), UsageError);
}

TEST_CASE("sgd momentum matches a scalar recurrence on f(w) = w^2") {
    auto p = make_param("w", Tensor::from_data({1}, {1.0f}));
    std::vector<ParamPtr> ps{p};
    float w_ref = 1.0f, v_ref = 0.0f;
    for (int step = 0; step < 10; ++step) {
        p->value.zero_grad();
        auto loss = mul(p->value, p->value);
        backward(sum(loss));
        sgd_step(ps, 0.1f, 0.9f, 0.0f);
        const float g = 2.0f * w_ref;
        v_ref = 0.9f * v_ref + g;
        w_ref -= 0.1f * v_ref;
        CHECK(p->value.data()[0] == doctest::Approx(w_ref).epsilon(1e-6));
    }
}

TEST_CASE("adam first step moves by ~lr*sign(g) and is deterministic") {
    auto run = [] {
        auto p = make_param("w", Tensor::from_data({2}, {1.0f, -1.0f}));
        AdamOptimizer opt({p}, 0.9f, 0.999f, 0.0f);
        for (int i = 0; i < 5; ++i) {
            p->value.zero_grad();
            auto loss = sum(mul(p->value, p->value));
            backward(loss);
            opt.step(0.01f);
        }
        return p->value.data();
    };
    auto a = run();
    auto b = run();
    CHECK(a == b);  // bit-identical trajectories
    CHECK(a[0] < 1.0f);
    CHECK(a[1] > -1.0f);
}

TEST_CASE("cross_entropy value sanity") {
    auto logits = Tensor::from_data({1, 2}, {0.0f, 0.0f});
    std::vector<int> labels{0};
    CHECK(cross_entropy(logits, labels).item() == doctest::Approx(std::log(2.0)));
    std::vector<int> bad{5};
    CHECK_THROWS_AS(cross_entropy(logits, bad), DataError);
}

TEST_CASE("weighted_sum forward and both gradient paths") {
    auto a = make_param("a", Tensor::from_data({2}, {1.0f, 2.0f}));
    auto w = make_param("w", Tensor::from_data({2}, {0.25f, 0.75f}));
    auto b = Tensor::from_data({2}, {3.0f, 4.0f});
    std::vector<Tensor> xs{a->value, b};
    auto out = weighted_sum(xs, w->value);
    CHECK(out.data()[0] == doctest::Approx(0.25f * 1.0f + 0.75f * 3.0f));
    backward(sum(out));
    CHECK(a->value.grad()[0] == doctest::Approx(0.25f));
    CHECK(w->value.grad()[1] == doctest::Approx(3.0f + 4.0f));
}
