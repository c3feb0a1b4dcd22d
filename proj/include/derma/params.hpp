#pragma once

// Naming scheme shared by the optimizer and the checkpoint container: models
// expose their learnable leaves and their non-learnable buffers (running
// statistics) as ordered name/value lists. Order is the model's declaration
// order and is part of the determinism contract.

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "derma/autodiff.hpp"
#include "derma/tensor.hpp"

namespace derma {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Var<T>>>;

template <typename T>
using NamedBuffers = std::vector<std::pair<std::string, Tensor<T>*>>;

template <typename T>
Var<T> find_param(const NamedParams<T>& params, const std::string& name) {
    for (const auto& [n, v] : params)
        if (n == name) return v;
    throw std::invalid_argument("find_param: no parameter named " + name);
}

template <typename T>
std::int64_t total_param_count(const NamedParams<T>& params) {
    std::int64_t n = 0;
    for (const auto& [name, v] : params) n += v.value().size();
    return n;
}

template <typename T>
void zero_all_grads(NamedParams<T>& params) {
    for (auto& [name, v] : params) v.zero_grad();
}

}  // namespace derma
