#pragma once

// Bias-corrected Adam with L2-style weight decay folded into the gradient, and
// the step-halving learning-rate schedule. Optimizer state is keyed by
// parameter name so it survives params() being rebuilt between calls.

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>

#include "derma/params.hpp"
#include "derma/tensor.hpp"

namespace derma {

/// lr0 * 0.5^floor(epoch / period); period 4 for segmentation, 3 for the
/// classifier.
inline double lr_schedule(double lr0, int epoch, int period) {
    if (epoch < 0 || period < 1) throw std::invalid_argument("lr_schedule: bad arguments");
    return lr0 * std::pow(0.5, static_cast<double>(epoch / period));
}

template <typename T>
class Adam {
public:
    struct Config {
        double lr = 1e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;  // applied as an L2 term added to gradients
    };

    explicit Adam(Config cfg) : cfg_(cfg) {
        if (cfg.lr <= 0 || cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1 ||
            cfg.eps <= 0 || cfg.weight_decay < 0)
            throw std::invalid_argument("Adam: bad hyperparameters");
    }

    double lr() const { return cfg_.lr; }
    void set_lr(double lr) {
        if (lr <= 0) throw std::invalid_argument("Adam: learning rate must be positive");
        cfg_.lr = lr;
    }
    std::int64_t step_count() const { return step_; }

    void step(NamedParams<T>& params) {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (auto& [name, var] : params) {
            Tensor<T>& value = var.value_mut();
            const Tensor<T>& grad = var.grad();
            auto it = moments_.find(name);
            if (it == moments_.end())
                it = moments_
                         .emplace(name, std::make_pair(Tensor<T>(value.shape()),
                                                       Tensor<T>(value.shape())))
                         .first;
            Tensor<T>& m = it->second.first;
            Tensor<T>& v = it->second.second;
            if (!m.same_shape(value) || !grad.same_shape(value))
                throw std::invalid_argument("Adam: shape mismatch for " + name);
            for (std::int64_t i = 0; i < value.size(); ++i) {
                const double g = static_cast<double>(grad[i]) +
                                 cfg_.weight_decay * static_cast<double>(value[i]);
                if (!std::isfinite(g))
                    throw std::runtime_error("Adam: non-finite gradient in " + name);
                m[i] = static_cast<T>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g);
                v[i] = static_cast<T>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g);
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                value[i] =
                    static_cast<T>(value[i] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
        }
    }

    /// Moment tensors plus the step counter, named for checkpointing.
    std::vector<std::pair<std::string, Tensor<T>>> named_state() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        Tensor<T> step({1});
        step[0] = static_cast<T>(step_);
        out.emplace_back("opt.step", std::move(step));
        for (const auto& [name, mv] : moments_) {
            out.emplace_back("opt.m." + name, mv.first);
            out.emplace_back("opt.v." + name, mv.second);
        }
        return out;
    }

    void load_state(const std::vector<std::pair<std::string, Tensor<T>>>& state) {
        moments_.clear();
        step_ = 0;
        std::map<std::string, const Tensor<T>*> by_name;
        for (const auto& [name, t] : state) by_name[name] = &t;
        auto it = by_name.find("opt.step");
        if (it == by_name.end()) throw std::invalid_argument("Adam: state lacks opt.step");
        step_ = static_cast<std::int64_t>((*it->second)[0]);
        for (const auto& [name, t] : by_name) {
            if (name.rfind("opt.m.", 0) != 0) continue;
            const std::string base = name.substr(6);
            auto vt = by_name.find("opt.v." + base);
            if (vt == by_name.end())
                throw std::invalid_argument("Adam: second moment missing for " + base);
            moments_.emplace(base, std::make_pair(*t, *vt->second));
        }
    }

private:
    Config cfg_;
    std::int64_t step_ = 0;
    std::map<std::string, std::pair<Tensor<T>, Tensor<T>>> moments_;
};

}  // namespace derma
