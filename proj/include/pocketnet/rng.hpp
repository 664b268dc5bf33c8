#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace pocketnet {

// Deterministic RNG. mt19937 output is pinned by the standard; the float
// mappings are our own so results never depend on libstdc++ distribution
// internals. Same seed -> bit-identical streams everywhere.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

    uint32_t next_u32() { return gen_(); }

    // uniform in [0, 1)
    float uniform() { return static_cast<float>(next_u32() >> 8) * (1.0f / 16777216.0f); }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n), n >= 1
    uint32_t uniform_int(uint32_t n) { return next_u32() % n; }

    bool bernoulli(float p) { return uniform() < p; }

    // standard normal via Box-Muller, cached spare
    float gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = (static_cast<double>(next_u32()) + 1.0) * (1.0 / 4294967296.0);
        const double u2 = static_cast<double>(next_u32()) * (1.0 / 4294967296.0);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 6.283185307179586 * u2;
        spare_ = static_cast<float>(r * std::sin(t));
        has_spare_ = true;
        return static_cast<float>(r * std::cos(t));
    }

    float gaussian(float mean, float stddev) { return mean + stddev * gaussian(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = uniform_int(static_cast<uint32_t>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937 gen_;
    bool has_spare_ = false;
    float spare_ = 0.0f;
};

}  // namespace pocketnet
