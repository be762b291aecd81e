#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "fcvit/tensor.hpp"

namespace fcvit {

/// Seeded generator. Distributions are written out here rather than taken
/// from <random> because the standard distributions are not specified
/// bit-for-bit, and weights, datasets and sampled coordinates must be
/// reproducible from a seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

    /// Standard normal via Box-Muller (one draw per call, the pair's second half is cached).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Normal(0, std) resampled until inside [-2 std, 2 std].
    double truncated_normal(double std) {
        for (;;) {
            double z = normal();
            if (std::abs(z) <= 2.0) return z * std;
        }
    }

    template <Real T>
    Tensor<T> normal_tensor(Shape shape, double std = 1.0) {
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data()) v = static_cast<T>(normal() * std);
        return t;
    }

    template <Real T>
    Tensor<T> uniform_tensor(Shape shape, double lo, double hi) {
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data()) v = static_cast<T>(uniform(lo, hi));
        return t;
    }

    template <typename Container>
    void shuffle(Container& c) {
        for (std::size_t i = c.size(); i > 1; --i) {
            std::size_t j = index(i);
            std::swap(c[i - 1], c[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace fcvit
