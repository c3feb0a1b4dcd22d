#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "derma/tensor.hpp"

namespace derma {

/// Deterministic counter-free random stream built on splitmix64.
/// Identical seed and call sequence produce identical draws on every
/// platform, which the stdlib distributions do not guarantee.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double next_uniform(double lo, double hi) {
        return lo + (hi - lo) * next_uniform();
    }

    /// Standard normal via Box-Muller; two uniforms per draw, no cached spare.
    double next_normal() {
        double u1 = next_uniform();
        double u2 = next_uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double next_normal(double mean, double stddev) {
        return mean + stddev * next_normal();
    }

    /// Integer in [0, n).
    std::uint64_t next_index(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("SeededRng::next_index: empty range");
        return next_u64() % n;
    }

    bool next_bernoulli(double p) { return next_uniform() < p; }

    /// Derive an independent child stream. The parent state is not advanced,
    /// so split(k) of a fresh stream is reproducible for any k.
    SeededRng split(std::uint64_t stream) const {
        SeededRng mix(state_ ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
        mix.next_u64();
        return SeededRng(mix.next_u64());
    }

private:
    std::uint64_t state_;
};

enum class Dist { uniform, normal };

/// Fill a fresh tensor with seeded draws. For uniform, (a, b) are the bounds
/// (default [0,1)); for normal, mean and stddev (default standard normal).
template <typename T>
Tensor<T> seeded_random_tensor(const std::vector<int>& shape, Dist dist, SeededRng& rng,
                               double a = 0.0, double b = 1.0) {
    if (shape.empty()) throw std::invalid_argument("seeded_random_tensor: empty shape");
    Tensor<T> t(shape);
    for (std::int64_t i = 0; i < t.size(); ++i) {
        double v = dist == Dist::uniform ? rng.next_uniform(a, b) : rng.next_normal(a, b);
        t[i] = static_cast<T>(v);
    }
    return t;
}

/// Uniform draws in [lo, hi).
template <typename T>
Tensor<T> random_uniform(const std::vector<int>& shape, T lo, T hi, SeededRng& rng) {
    Tensor<T> t(shape);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.next_uniform(lo, hi));
    return t;
}

template <typename T>
Tensor<T> random_normal(const std::vector<int>& shape, T mean, T stddev, SeededRng& rng) {
    Tensor<T> t(shape);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.next_normal(mean, stddev));
    return t;
}

}  // namespace derma
