#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "derma/tensor.hpp"

namespace derma {

/// One recorded operation in the reverse-mode graph. The graph doubles as the
/// tape: nodes are created in topological order, so backward runs in strictly
/// descending creation order and visits each node exactly once. Gradient
/// accumulation order is therefore fixed and reproducible.
template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;
    bool needs_grad = false;
    std::int64_t id = 0;

    /// Accumulate into this node's gradient, sizing it on first touch.
    void add_grad(const Tensor<T>& g) {
        if (grad.size() == 0) grad = Tensor<T>(value.shape());
        if (!grad.same_shape(g))
            throw std::invalid_argument("Node::add_grad: gradient shape mismatch");
        T* dst = grad.data();
        const T* src = g.data();
        for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += src[i];
    }

    Tensor<T>& grad_or_zeros() {
        if (grad.size() == 0) grad = Tensor<T>(value.shape());
        return grad;
    }
};

namespace detail {
inline std::int64_t next_node_id() {
    static std::atomic<std::int64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

/// Handle to a node in the differentiation graph. Cheap to copy; the graph is
/// released when the last handle to its sink goes away. Leaf handles held by a
/// model persist across steps.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Var leaf(Tensor<T> value, bool needs_grad = false) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        n->needs_grad = needs_grad;
        n->id = detail::next_node_id();
        return Var(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& value_mut() { return node_->value; }
    const std::vector<int>& shape() const { return node_->value.shape(); }
    bool needs_grad() const { return node_->needs_grad; }

    /// Gradient accumulated by the last backward pass (zeros if untouched).
    Tensor<T>& grad() { return node_->grad_or_zeros(); }

    void zero_grad() {
        if (node_->grad.size() != 0) node_->grad.fill(T(0));
    }

    std::shared_ptr<Node<T>> node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Build an operation node. `backward` reads self.grad and accumulates into
/// self.inputs[i]->grad; it is dropped when no input needs gradients.
template <typename T, typename F>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> inputs, F backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->inputs.reserve(inputs.size());
    for (auto& v : inputs) {
        if (!v.defined()) throw std::invalid_argument("make_node: undefined input");
        n->needs_grad = n->needs_grad || v.needs_grad();
        n->inputs.push_back(v.node());
    }
    if (n->needs_grad) n->backward = std::function<void(Node<T>&)>(std::move(backward));
    n->id = detail::next_node_id();
    return Var<T>(std::move(n));
}

/// Reverse-mode sweep from a scalar loss. Rejects non-scalar sinks and any
/// recorded node that needs gradients but carries no backward rule.
template <typename T>
void backward(Var<T> loss) {
    if (!loss.defined()) throw std::invalid_argument("backward: undefined loss");
    if (loss.value().size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                    Tensor<T>::shape_string(loss.shape()));

    // Collect reachable nodes; creation ids give a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{loss.node().get()};
    while (!stack.empty()) {
        Node<T>* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        order.push_back(n);
        for (auto& in : n->inputs) stack.push_back(in.get());
    }
    std::sort(order.begin(), order.end(),
              [](const Node<T>* a, const Node<T>* b) { return a->id > b->id; });

    loss.node()->add_grad(Tensor<T>::scalar(T(1)));
    for (Node<T>* n : order) {
        if (!n->needs_grad || n->grad.size() == 0) continue;
        if (n->inputs.empty()) continue;  // leaf
        if (!n->backward)
            throw std::runtime_error("backward: node without backward rule in gradient path");
        n->backward(*n);
    }
}

/// Evaluate f over leaf wrappers of `params` and return the scalar value plus
/// d(value)/d(param) for every parameter; unused parameters get zeros.
template <typename T, typename F>
std::pair<Tensor<T>, std::vector<Tensor<T>>> forward_and_backward(F f,
                                                                  const std::vector<Tensor<T>>& params) {
    std::vector<Var<T>> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(Var<T>::leaf(p, true));
    Var<T> out = f(leaves);
    backward(out);
    std::vector<Tensor<T>> grads;
    grads.reserve(leaves.size());
    for (auto& l : leaves) grads.push_back(l.grad());
    return {out.value(), std::move(grads)};
}

// ---------------------------------------------------------------------------
// Elementwise and shape primitives
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (!a.value().same_shape(b.value()))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    Tensor<T>::shape_string(a.shape()) + " vs " +
                                    Tensor<T>::shape_string(b.shape()));
}
}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require_same_shape(a, b, "add");
    Tensor<T> out = a.value();
    const T* bp = b.value().data();
    T* op = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) op[i] += bp[i];
    return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
        if (self.inputs[0]->needs_grad) self.inputs[0]->add_grad(self.grad);
        if (self.inputs[1]->needs_grad) self.inputs[1]->add_grad(self.grad);
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    detail::require_same_shape(a, b, "sub");
    Tensor<T> out = a.value();
    const T* bp = b.value().data();
    T* op = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) op[i] -= bp[i];
    return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
        if (self.inputs[0]->needs_grad) self.inputs[0]->add_grad(self.grad);
        if (self.inputs[1]->needs_grad) {
            Tensor<T> g = self.grad;
            T* gp = g.data();
            for (std::int64_t i = 0; i < g.size(); ++i) gp[i] = -gp[i];
            self.inputs[1]->add_grad(g);
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require_same_shape(a, b, "mul");
    Tensor<T> out = a.value();
    const T* bp = b.value().data();
    T* op = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) op[i] *= bp[i];
    return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
        const Tensor<T>& av = self.inputs[0]->value;
        const Tensor<T>& bv = self.inputs[1]->value;
        if (self.inputs[0]->needs_grad) {
            Tensor<T> g(av.shape());
            for (std::int64_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * bv[i];
            self.inputs[0]->add_grad(g);
        }
        if (self.inputs[1]->needs_grad) {
            Tensor<T> g(bv.shape());
            for (std::int64_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * av[i];
            self.inputs[1]->add_grad(g);
        }
    });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
    detail::require_same_shape(a, b, "div");
    Tensor<T> out = a.value();
    const T* bp = b.value().data();
    T* op = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) op[i] /= bp[i];
    return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
        const Tensor<T>& av = self.inputs[0]->value;
        const Tensor<T>& bv = self.inputs[1]->value;
        if (self.inputs[0]->needs_grad) {
            Tensor<T> g(av.shape());
            for (std::int64_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] / bv[i];
            self.inputs[0]->add_grad(g);
        }
        if (self.inputs[1]->needs_grad) {
            Tensor<T> g(bv.shape());
            for (std::int64_t i = 0; i < g.size(); ++i)
                g[i] = -self.grad[i] * av[i] / (bv[i] * bv[i]);
            self.inputs[1]->add_grad(g);
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
    Tensor<T> out = a.value();
    T* op = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) op[i] *= c;
    return make_node<T>(std::move(out), {a}, [c](Node<T>& self) {
        Tensor<T> g = self.grad;
        T* gp = g.data();
        for (std::int64_t i = 0; i < g.size(); ++i) gp[i] *= c;
        self.inputs[0]->add_grad(g);
    });
}

template <typename T>
Var<T> add_const(Var<T> a, T c) {
    Tensor<T> out = a.value();
    T* op = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) op[i] += c;
    return make_node<T>(std::move(out), {a},
                        [](Node<T>& self) { self.inputs[0]->add_grad(self.grad); });
}

template <typename T>
Var<T> sum(Var<T> a) {
    T acc = T(0);
    const T* ap = a.value().data();
    for (std::int64_t i = 0; i < a.value().size(); ++i) acc += ap[i];
    return make_node<T>(Tensor<T>::scalar(acc), {a}, [](Node<T>& self) {
        Tensor<T> g(self.inputs[0]->value.shape());
        g.fill(self.grad[0]);
        self.inputs[0]->add_grad(g);
    });
}

template <typename T>
Var<T> mean(Var<T> a) {
    const std::int64_t n = a.value().size();
    T acc = T(0);
    const T* ap = a.value().data();
    for (std::int64_t i = 0; i < n; ++i) acc += ap[i];
    acc /= static_cast<T>(n);
    return make_node<T>(Tensor<T>::scalar(acc), {a}, [n](Node<T>& self) {
        Tensor<T> g(self.inputs[0]->value.shape());
        g.fill(self.grad[0] / static_cast<T>(n));
        self.inputs[0]->add_grad(g);
    });
}

template <typename T>
Var<T> relu(Var<T> a) {
    Tensor<T> out = a.value();
    T* op = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) op[i] = op[i] > T(0) ? op[i] : T(0);
    return make_node<T>(std::move(out), {a}, [](Node<T>& self) {
        const Tensor<T>& x = self.inputs[0]->value;
        Tensor<T> g(x.shape());
        for (std::int64_t i = 0; i < g.size(); ++i) g[i] = x[i] > T(0) ? self.grad[i] : T(0);
        self.inputs[0]->add_grad(g);
    });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
    Tensor<T> out(a.value().shape());
    const T* ap = a.value().data();
    T* op = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i)
        op[i] = T(1) / (T(1) + std::exp(-ap[i]));
    Tensor<T> saved = out;
    return make_node<T>(std::move(out), {a}, [saved](Node<T>& self) {
        Tensor<T> g(saved.shape());
        for (std::int64_t i = 0; i < g.size(); ++i)
            g[i] = self.grad[i] * saved[i] * (T(1) - saved[i]);
        self.inputs[0]->add_grad(g);
    });
}

template <typename T>
Var<T> log_op(Var<T> a) {
    Tensor<T> out(a.value().shape());
    const T* ap = a.value().data();
    T* op = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) op[i] = std::log(ap[i]);
    return make_node<T>(std::move(out), {a}, [](Node<T>& self) {
        const Tensor<T>& x = self.inputs[0]->value;
        Tensor<T> g(x.shape());
        for (std::int64_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] / x[i];
        self.inputs[0]->add_grad(g);
    });
}

/// Clamp to [lo, hi]; gradient passes through only strictly inside the band.
template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
    Tensor<T> out = a.value();
    T* op = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) op[i] = std::min(hi, std::max(lo, op[i]));
    return make_node<T>(std::move(out), {a}, [lo, hi](Node<T>& self) {
        const Tensor<T>& x = self.inputs[0]->value;
        Tensor<T> g(x.shape());
        for (std::int64_t i = 0; i < g.size(); ++i)
            g[i] = (x[i] > lo && x[i] < hi) ? self.grad[i] : T(0);
        self.inputs[0]->add_grad(g);
    });
}

template <typename T>
Var<T> reshape(Var<T> a, std::vector<int> shape) {
    Tensor<T> out = a.value().reshaped(shape);
    return make_node<T>(std::move(out), {a}, [](Node<T>& self) {
        self.inputs[0]->add_grad(self.grad.reshaped(self.inputs[0]->value.shape()));
    });
}

namespace detail {
inline std::vector<std::int64_t> row_major_strides(const std::vector<int>& shape) {
    std::vector<std::int64_t> s(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
        s[i] = s[i + 1] * shape[i + 1];
    return s;
}

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& x, const std::vector<int>& perm) {
    const auto& in_shape = x.shape();
    std::vector<int> out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape[perm[i]];
    Tensor<T> out(out_shape);
    auto in_strides = row_major_strides(in_shape);
    auto out_strides = row_major_strides(out_shape);
    const int r = static_cast<int>(perm.size());
    std::vector<int> idx(r, 0);
    const T* src = x.data();
    T* dst = out.data();
    const std::int64_t n = x.size();
    for (std::int64_t o = 0; o < n; ++o) {
        std::int64_t src_off = 0;
        for (int d = 0; d < r; ++d) src_off += idx[d] * in_strides[perm[d]];
        dst[o] = src[src_off];
        for (int d = r - 1; d >= 0; --d) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    return out;
}

inline std::vector<int> inverse_perm(const std::vector<int>& perm) {
    std::vector<int> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<int>(i);
    return inv;
}
}  // namespace detail

template <typename T>
Var<T> permute(Var<T> a, std::vector<int> perm) {
    if (perm.size() != a.value().shape().size())
        throw std::invalid_argument("permute: order rank mismatch");
    Tensor<T> out = detail::permute_tensor(a.value(), perm);
    return make_node<T>(std::move(out), {a}, [perm](Node<T>& self) {
        self.inputs[0]->add_grad(detail::permute_tensor(self.grad, detail::inverse_perm(perm)));
    });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const auto& first = parts[0].value().shape();
    const int r = static_cast<int>(first.size());
    if (axis < 0 || axis >= r) throw std::invalid_argument("concat: bad axis");
    std::vector<int> out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const auto& s = p.value().shape();
        if (static_cast<int>(s.size()) != r)
            throw std::invalid_argument("concat: rank mismatch");
        for (int d = 0; d < r; ++d)
            if (d != axis && s[d] != first[d])
                throw std::invalid_argument("concat: extent mismatch on axis " + std::to_string(d));
        out_shape[axis] += s[axis];
    }

    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= first[d];
    for (int d = axis + 1; d < r; ++d) inner *= first[d];

    Tensor<T> out(out_shape);
    std::vector<int> axis_extents;
    axis_extents.reserve(parts.size());
    {
        T* dst = out.data();
        const std::int64_t out_row = static_cast<std::int64_t>(out_shape[axis]) * inner;
        std::int64_t axis_off = 0;
        for (const auto& p : parts) {
            const int e = p.value().shape()[axis];
            axis_extents.push_back(e);
            const T* src = p.value().data();
            for (std::int64_t o = 0; o < outer; ++o) {
                std::copy(src + o * e * inner, src + (o + 1) * e * inner,
                          dst + o * out_row + axis_off * inner);
            }
            axis_off += e;
        }
    }
    return make_node<T>(std::move(out), parts, [axis_extents, outer, inner](Node<T>& self) {
        const std::int64_t out_axis =
            std::accumulate(axis_extents.begin(), axis_extents.end(), std::int64_t(0));
        const std::int64_t out_row = out_axis * inner;
        std::int64_t axis_off = 0;
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
            const int e = axis_extents[k];
            if (self.inputs[k]->needs_grad) {
                Tensor<T> g(self.inputs[k]->value.shape());
                T* dst = g.data();
                const T* src = self.grad.data();
                for (std::int64_t o = 0; o < outer; ++o)
                    std::copy(src + o * out_row + axis_off * inner,
                              src + o * out_row + (axis_off + e) * inner, dst + o * e * inner);
                self.inputs[k]->add_grad(g);
            }
            axis_off += e;
        }
    });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace detail {
/// C(M,N) += A(M,K) * B(K,N); C must be pre-zeroed by the caller.
template <typename T>
void matmul_acc(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            const T* brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

/// C(M,N) += A(K,M)^T * B(K,N).
template <typename T>
void matmul_at_acc(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (std::int64_t i = 0; i < m; ++i) {
            const T av = arow[i];
            if (av == T(0)) continue;
            T* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

/// C(M,N) += A(M,K) * B(N,K)^T.
template <typename T>
void matmul_bt_acc(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}
}  // namespace detail

/// Batched matrix product over the last two axes; all leading axes must match.
/// Rank-2 inputs give the plain matrix product.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const auto& as = a.value().shape();
    const auto& bs = b.value().shape();
    if (as.size() < 2 || as.size() != bs.size())
        throw std::invalid_argument("matmul: rank mismatch");
    const int r = static_cast<int>(as.size());
    std::int64_t batch = 1;
    for (int d = 0; d < r - 2; ++d) {
        if (as[d] != bs[d]) throw std::invalid_argument("matmul: leading extent mismatch");
        batch *= as[d];
    }
    const std::int64_t m = as[r - 2], k = as[r - 1], k2 = bs[r - 2], n = bs[r - 1];
    if (k != k2)
        throw std::invalid_argument("matmul: inner extent mismatch " + std::to_string(k) + " vs " +
                                    std::to_string(k2));
    std::vector<int> out_shape(as.begin(), as.end() - 1);
    out_shape.back() = static_cast<int>(m);
    out_shape.push_back(static_cast<int>(n));

    Tensor<T> out(out_shape);
    for (std::int64_t bi = 0; bi < batch; ++bi)
        detail::matmul_acc(a.value().data() + bi * m * k, b.value().data() + bi * k * n,
                           out.data() + bi * m * n, m, k, n);

    return make_node<T>(std::move(out), {a, b}, [batch, m, k, n](Node<T>& self) {
        const Tensor<T>& av = self.inputs[0]->value;
        const Tensor<T>& bv = self.inputs[1]->value;
        if (self.inputs[0]->needs_grad) {
            Tensor<T> ga(av.shape());
            for (std::int64_t bi = 0; bi < batch; ++bi)
                detail::matmul_bt_acc(self.grad.data() + bi * m * n, bv.data() + bi * k * n,
                                      ga.data() + bi * m * k, m, n, k);
            self.inputs[0]->add_grad(ga);
        }
        if (self.inputs[1]->needs_grad) {
            Tensor<T> gb(bv.shape());
            for (std::int64_t bi = 0; bi < batch; ++bi)
                detail::matmul_at_acc(av.data() + bi * m * k, self.grad.data() + bi * m * n,
                                      gb.data() + bi * k * n, k, m, n);
            self.inputs[1]->add_grad(gb);
        }
    });
}

/// Softmax along `axis`, computed with max-subtraction.
template <typename T>
Var<T> softmax(Var<T> a, int axis) {
    const auto& shape = a.value().shape();
    const int r = static_cast<int>(shape.size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw std::invalid_argument("softmax: bad axis");
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= shape[d];
    for (int d = axis + 1; d < r; ++d) inner *= shape[d];
    const std::int64_t e = shape[axis];

    Tensor<T> out(shape);
    const T* src = a.value().data();
    T* dst = out.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * e * inner + in;
            T mx = src[base];
            for (std::int64_t j = 1; j < e; ++j) mx = std::max(mx, src[base + j * inner]);
            T denom = T(0);
            for (std::int64_t j = 0; j < e; ++j) {
                const T v = std::exp(src[base + j * inner] - mx);
                dst[base + j * inner] = v;
                denom += v;
            }
            for (std::int64_t j = 0; j < e; ++j) dst[base + j * inner] /= denom;
        }
    }
    Tensor<T> saved = out;
    return make_node<T>(std::move(out), {a}, [saved, outer, inner, e](Node<T>& self) {
        Tensor<T> g(saved.shape());
        const T* y = saved.data();
        const T* dy = self.grad.data();
        T* dx = g.data();
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t in = 0; in < inner; ++in) {
                const std::int64_t base = o * e * inner + in;
                T dot = T(0);
                for (std::int64_t j = 0; j < e; ++j)
                    dot += dy[base + j * inner] * y[base + j * inner];
                for (std::int64_t j = 0; j < e; ++j) {
                    const std::int64_t off = base + j * inner;
                    dx[off] = y[off] * (dy[off] - dot);
                }
            }
        }
        self.inputs[0]->add_grad(g);
    });
}

/// Pick a single element as a scalar graph output.
template <typename T>
Var<T> select_scalar(Var<T> a, std::int64_t flat_index) {
    if (flat_index < 0 || flat_index >= a.value().size())
        throw std::invalid_argument("select_scalar: index out of range");
    Tensor<T> out = Tensor<T>::scalar(a.value()[flat_index]);
    return make_node<T>(std::move(out), {a}, [flat_index](Node<T>& self) {
        Tensor<T> g(self.inputs[0]->value.shape());
        g[flat_index] = self.grad[0];
        self.inputs[0]->add_grad(g);
    });
}

}  // namespace derma
