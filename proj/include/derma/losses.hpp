#pragma once

// Differentiable training losses. All losses are scalar graph nodes built from
// autodiff primitives, so gradients flow to every prediction input.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "derma/autodiff.hpp"
#include "derma/tensor.hpp"

namespace derma {

/// Predicted probabilities paired with a binary ground-truth mask. The truth
/// side never receives gradients. eps = 0 is allowed for non-degenerate masks;
/// the default keeps the empty-vs-empty case finite.
template <typename T>
struct MaskPair {
    Var<T> pred;
    Var<T> truth;
    T eps;

    MaskPair(Var<T> pred_probs, Var<T> ground_truth, T smoothing = T(1e-6))
        : pred(std::move(pred_probs)), truth(std::move(ground_truth)), eps(smoothing) {
        if (!pred.defined() || !truth.defined())
            throw std::invalid_argument("MaskPair: undefined tensors");
        if (!pred.value().same_shape(truth.value()))
            throw std::invalid_argument("MaskPair: shape mismatch " +
                                        Tensor<T>::shape_string(pred.shape()) + " vs " +
                                        Tensor<T>::shape_string(truth.shape()));
        if (eps < T(0)) throw std::invalid_argument("MaskPair: eps must be non-negative");
    }
};

/// 1 - (2*sum(y*p) + eps) / (sum(y) + sum(p) + eps)
template <typename T>
Var<T> dice_loss(const MaskPair<T>& pair) {
    auto inter = sum(mul(pair.truth, pair.pred));
    auto denom = add(sum(pair.truth), sum(pair.pred));
    auto ratio = div(add_const(scale(inter, T(2)), pair.eps), add_const(denom, pair.eps));
    return add_const(scale(ratio, T(-1)), T(1));
}

/// -(1/N) * sum(y*log(p) + (1-y)*log(1-p)) with p clipped to [1e-7, 1-1e-7].
template <typename T>
Var<T> bce_loss(const MaskPair<T>& pair) {
    const T lo = T(1e-7), hi = T(1) - T(1e-7);
    auto p = clamp(pair.pred, lo, hi);
    auto one_minus_p = add_const(scale(p, T(-1)), T(1));
    auto one_minus_y = add_const(scale(pair.truth, T(-1)), T(1));
    auto term = add(mul(pair.truth, log_op(p)), mul(one_minus_y, log_op(one_minus_p)));
    return scale(mean(term), T(-1));
}

/// Final-output objective: BCE plus Dice.
template <typename T>
Var<T> seg_main_loss(const MaskPair<T>& pair) {
    return add(bce_loss(pair), dice_loss(pair));
}

/// Deep-supervision objective: main + 0.2*aux1 + 0.1*aux2. All three pairs
/// must share one ground truth.
template <typename T>
Var<T> seg_total_loss(const MaskPair<T>& final_pair, const MaskPair<T>& aux1,
                      const MaskPair<T>& aux2) {
    auto same_truth = [](const MaskPair<T>& a, const MaskPair<T>& b) {
        if (!a.truth.value().same_shape(b.truth.value())) return false;
        for (std::int64_t i = 0; i < a.truth.value().size(); ++i)
            if (a.truth.value()[i] != b.truth.value()[i]) return false;
        return true;
    };
    if (!same_truth(final_pair, aux1) || !same_truth(final_pair, aux2))
        throw std::invalid_argument("seg_total_loss: pairs disagree on the ground truth");
    return add(seg_main_loss(final_pair),
               add(scale(seg_main_loss(aux1), T(0.2)), scale(seg_main_loss(aux2), T(0.1))));
}

/// Mean over the batch of -log softmax(logits)[label], in log-sum-exp form.
template <typename T>
Var<T> cross_entropy_loss(const Var<T>& logits, const std::vector<int>& labels) {
    if (logits.value().rank() != 2) throw std::invalid_argument("cross_entropy_loss: logits must be (B,C)");
    const int B = logits.value().shape()[0];
    const int C = logits.value().shape()[1];
    if (static_cast<int>(labels.size()) != B)
        throw std::invalid_argument("cross_entropy_loss: labels size mismatch");
    for (int label : labels)
        if (label < 0 || label >= C)
            throw std::invalid_argument("cross_entropy_loss: label " + std::to_string(label) +
                                        " outside [0," + std::to_string(C) + ")");

    T total = T(0);
    for (int b = 0; b < B; ++b) {
        const T* row = logits.value().data() + static_cast<std::int64_t>(b) * C;
        T m = row[0];
        for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
        T acc = T(0);
        for (int c = 0; c < C; ++c) acc += std::exp(row[c] - m);
        total += m + std::log(acc) - row[labels[b]];
    }
    Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(B));

    return make_node<T>(std::move(out), {logits}, [B, C, labels](Node<T>& n) {
        auto& lin = *n.inputs[0];
        if (!lin.needs_grad) return;
        const T g = n.grad[0] / static_cast<T>(B);
        auto& dl = lin.grad_or_zeros();
        for (int b = 0; b < B; ++b) {
            const T* row = lin.value.data() + static_cast<std::int64_t>(b) * C;
            T* drow = dl.data() + static_cast<std::int64_t>(b) * C;
            T m = row[0];
            for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
            T z = T(0);
            for (int c = 0; c < C; ++c) z += std::exp(row[c] - m);
            for (int c = 0; c < C; ++c) {
                const T p = std::exp(row[c] - m) / z;
                drow[c] += g * (p - (c == labels[b] ? T(1) : T(0)));
            }
        }
    });
}

/// Evaluation convenience: wraps the logits in a constant leaf.
template <typename T>
Var<T> cross_entropy_loss(const Tensor<T>& logits, const std::vector<int>& labels) {
    return cross_entropy_loss(Var<T>::leaf(logits), labels);
}

}  // namespace derma
