#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "derma/rng.hpp"
#include "derma/tensor.hpp"

namespace derma {

/// Central-difference gradient estimate, one full tensor per parameter.
/// f evaluates the scalar objective on plain parameter tensors only, so this
/// path is independent of the reverse-mode sweep it is used to check.
template <typename F>
std::vector<Tensor<double>> finite_difference_gradient(F f, std::vector<Tensor<double>> params,
                                                       double h = 1e-5) {
    if (h <= 0.0) throw std::invalid_argument("finite_difference_gradient: h must be positive");
    std::vector<Tensor<double>> grads;
    grads.reserve(params.size());
    for (const auto& p : params) grads.emplace_back(p.shape());
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        for (std::int64_t i = 0; i < params[pi].size(); ++i) {
            const double orig = params[pi][i];
            params[pi][i] = orig + h;
            const double fp = f(params);
            params[pi][i] = orig - h;
            const double fm = f(params);
            params[pi][i] = orig;
            grads[pi][i] = (fp - fm) / (2.0 * h);
        }
    }
    return grads;
}

/// Relative error with an absolute floor, so near-zero coordinates stay
/// meaningful instead of dividing by noise.
inline double gradient_rel_error(double analytic, double fd, double floor = 1e-4) {
    const double denom = std::max({std::abs(analytic), std::abs(fd), floor});
    return std::abs(analytic - fd) / denom;
}

/// Worst-coordinate relative error between analytic and finite-difference
/// gradients over every parameter.
inline double max_gradient_rel_error(const std::vector<Tensor<double>>& analytic,
                                     const std::vector<Tensor<double>>& fd,
                                     double floor = 1e-4) {
    if (analytic.size() != fd.size())
        throw std::invalid_argument("max_gradient_rel_error: parameter count mismatch");
    double worst = 0.0;
    for (std::size_t p = 0; p < analytic.size(); ++p) {
        if (!analytic[p].same_shape(fd[p]))
            throw std::invalid_argument("max_gradient_rel_error: shape mismatch");
        for (std::int64_t i = 0; i < analytic[p].size(); ++i)
            worst = std::max(worst, gradient_rel_error(analytic[p][i], fd[p][i], floor));
    }
    return worst;
}

/// Spot-check analytic gradients on `probes` seeded random coordinates.
/// Full-coordinate sweeps are too slow for whole networks; sampled probes
/// keep end-to-end checks cheap. Returns the worst probe error.
template <typename F>
double probe_gradient_rel_error(F f, std::vector<Tensor<double>> params,
                                const std::vector<Tensor<double>>& analytic, int probes,
                                SeededRng& rng, double h = 1e-5, double floor = 1e-4) {
    std::int64_t total = 0;
    for (const auto& p : params) total += p.size();
    if (total == 0) throw std::invalid_argument("probe_gradient_rel_error: no coordinates");
    double worst = 0.0;
    for (int q = 0; q < probes; ++q) {
        std::int64_t target = static_cast<std::int64_t>(rng.next_index(static_cast<std::uint64_t>(total)));
        std::size_t pi = 0;
        while (target >= params[pi].size()) {
            target -= params[pi].size();
            ++pi;
        }
        const double orig = params[pi][target];
        params[pi][target] = orig + h;
        const double fp = f(params);
        params[pi][target] = orig - h;
        const double fm = f(params);
        params[pi][target] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        worst = std::max(worst, gradient_rel_error(analytic[pi][target], fd, floor));
    }
    return worst;
}

}  // namespace derma
