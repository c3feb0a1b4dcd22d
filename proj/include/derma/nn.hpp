#pragma once

// Differentiable neural-network layers on top of the autodiff graph.
// Convolutions are fused nodes: im2col buffers are rebuilt in backward
// instead of being stored, trading compute for memory.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "derma/autodiff.hpp"
#include "derma/rng.hpp"
#include "derma/tensor.hpp"

namespace derma::nn {

enum class Mode { train, infer };
enum class PadMode { zero, wrap };

template <typename T>
Tensor<T> kaiming_uniform(const std::vector<int>& shape, std::int64_t fan_in, SeededRng& rng) {
    if (fan_in <= 0) throw std::invalid_argument("kaiming_uniform: fan_in must be positive");
    const T bound = static_cast<T>(std::sqrt(6.0 / static_cast<double>(fan_in)));
    return random_uniform<T>(shape, -bound, bound, rng);
}

template <typename T>
Tensor<T> xavier_uniform(const std::vector<int>& shape, std::int64_t fan_in, std::int64_t fan_out,
                         SeededRng& rng) {
    if (fan_in <= 0 || fan_out <= 0) throw std::invalid_argument("xavier_uniform: fans must be positive");
    const T bound = static_cast<T>(std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
    return random_uniform<T>(shape, -bound, bound, rng);
}

namespace detail {

// Maps a padded coordinate to a source index, or -1 when it falls in zero padding.
inline int pad_index(int i, int extent, PadMode mode) {
    if (i >= 0 && i < extent) return i;
    if (mode == PadMode::zero) return -1;
    int m = i % extent;
    return m < 0 ? m + extent : m;
}

struct ConvGeom {
    int batch, c_in, h, w;
    int c_out, kh, kw;
    int stride, pad, dilation;
    int h_out, w_out;
};

template <typename T>
ConvGeom conv_geometry(const Tensor<T>& x, const Tensor<T>& weight, int stride, int pad,
                       int dilation) {
    if (x.rank() != 4) throw std::invalid_argument("conv2d: input must be (B,C,H,W)");
    if (weight.rank() != 4) throw std::invalid_argument("conv2d: weight must be (Cout,Cin,kH,kW)");
    if (stride < 1 || dilation < 1 || pad < 0)
        throw std::invalid_argument("conv2d: bad stride/pad/dilation");
    ConvGeom g;
    g.batch = x.shape()[0];
    g.c_in = x.shape()[1];
    g.h = x.shape()[2];
    g.w = x.shape()[3];
    g.c_out = weight.shape()[0];
    g.kh = weight.shape()[2];
    g.kw = weight.shape()[3];
    if (weight.shape()[1] != g.c_in)
        throw std::invalid_argument("conv2d: weight channel mismatch, input has " +
                                    std::to_string(g.c_in) + " channels, weight expects " +
                                    std::to_string(weight.shape()[1]));
    g.stride = stride;
    g.pad = pad;
    g.dilation = dilation;
    const int eff_kh = (g.kh - 1) * dilation + 1;
    const int eff_kw = (g.kw - 1) * dilation + 1;
    g.h_out = (g.h + 2 * pad - eff_kh) / stride + 1;
    g.w_out = (g.w + 2 * pad - eff_kw) / stride + 1;
    if (g.h_out < 1 || g.w_out < 1)
        throw std::invalid_argument("conv2d: kernel does not fit input (H=" + std::to_string(g.h) +
                                    ", W=" + std::to_string(g.w) + ")");
    return g;
}

// cols is (Cin*kH*kW, Hout*Wout) for one batch item.
template <typename T>
void im2col(const T* x, const ConvGeom& g, PadMode mode, T* cols) {
    const std::int64_t plane = static_cast<std::int64_t>(g.h) * g.w;
    const std::int64_t out_plane = static_cast<std::int64_t>(g.h_out) * g.w_out;
    std::int64_t row = 0;
    for (int c = 0; c < g.c_in; ++c) {
        for (int kh = 0; kh < g.kh; ++kh) {
            for (int kw = 0; kw < g.kw; ++kw, ++row) {
                T* dst = cols + row * out_plane;
                for (int oh = 0; oh < g.h_out; ++oh) {
                    const int ih = pad_index(oh * g.stride - g.pad + kh * g.dilation, g.h, mode);
                    for (int ow = 0; ow < g.w_out; ++ow) {
                        const int iw = pad_index(ow * g.stride - g.pad + kw * g.dilation, g.w, mode);
                        dst[oh * g.w_out + ow] =
                            (ih < 0 || iw < 0) ? T(0) : x[c * plane + ih * g.w + iw];
                    }
                }
            }
        }
    }
}

// Scatter-add of a column gradient back onto the input gradient.
template <typename T>
void col2im_acc(const T* cols, const ConvGeom& g, PadMode mode, T* dx) {
    const std::int64_t plane = static_cast<std::int64_t>(g.h) * g.w;
    const std::int64_t out_plane = static_cast<std::int64_t>(g.h_out) * g.w_out;
    std::int64_t row = 0;
    for (int c = 0; c < g.c_in; ++c) {
        for (int kh = 0; kh < g.kh; ++kh) {
            for (int kw = 0; kw < g.kw; ++kw, ++row) {
                const T* src = cols + row * out_plane;
                for (int oh = 0; oh < g.h_out; ++oh) {
                    const int ih = pad_index(oh * g.stride - g.pad + kh * g.dilation, g.h, mode);
                    if (ih < 0) continue;
                    for (int ow = 0; ow < g.w_out; ++ow) {
                        const int iw = pad_index(ow * g.stride - g.pad + kw * g.dilation, g.w, mode);
                        if (iw < 0) continue;
                        dx[c * plane + ih * g.w + iw] += src[oh * g.w_out + ow];
                    }
                }
            }
        }
    }
}

// C (m,n) += A (m,k) * B (k,n)
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            if (av == T(0)) continue;
            const T* brow = b + p * n;
            T* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C (m,n) += A^T where A is (k,m), B (k,n)
template <typename T>
void gemm_at_acc(const T* a, const T* b, T* c, std::int64_t k, std::int64_t m, std::int64_t n) {
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

// C (m,k) += A (m,n) * B^T where B is (k,n)
template <typename T>
void gemm_bt_acc(const T* a, const T* b, T* c, std::int64_t m, std::int64_t n, std::int64_t k) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * n;
        T* crow = c + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            const T* brow = b + p * n;
            T acc = T(0);
            for (std::int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
            crow[p] += acc;
        }
    }
}

}  // namespace detail

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride = 1,
              int pad = 0, int dilation = 1, PadMode pad_mode = PadMode::zero) {
    const auto g = detail::conv_geometry(x.value(), weight.value(), stride, pad, dilation);
    if (bias.defined() && bias.value().size() != g.c_out)
        throw std::invalid_argument("conv2d: bias size mismatch");

    const std::int64_t ckk = static_cast<std::int64_t>(g.c_in) * g.kh * g.kw;
    const std::int64_t out_plane = static_cast<std::int64_t>(g.h_out) * g.w_out;
    const std::int64_t in_count = static_cast<std::int64_t>(g.c_in) * g.h * g.w;
    const std::int64_t out_count = static_cast<std::int64_t>(g.c_out) * out_plane;

    Tensor<T> out({g.batch, g.c_out, g.h_out, g.w_out});
    std::vector<T> cols(ckk * out_plane);
    for (int b = 0; b < g.batch; ++b) {
        detail::im2col(x.value().data() + b * in_count, g, pad_mode, cols.data());
        T* out_b = out.data() + b * out_count;
        detail::gemm_acc(weight.value().data(), cols.data(), out_b, g.c_out, ckk, out_plane);
        if (bias.defined()) {
            for (int c = 0; c < g.c_out; ++c) {
                const T bv = bias.value()[c];
                for (std::int64_t i = 0; i < out_plane; ++i) out_b[c * out_plane + i] += bv;
            }
        }
    }

    std::vector<Var<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    const bool has_bias = bias.defined();
    return make_node<T>(std::move(out), inputs, [g, pad_mode, has_bias, ckk, out_plane, in_count,
                                                 out_count](Node<T>& n) {
        auto& xin = *n.inputs[0];
        auto& win = *n.inputs[1];
        std::vector<T> cols(ckk * out_plane);
        std::vector<T> dcols(ckk * out_plane);
        for (int b = 0; b < g.batch; ++b) {
            const T* dout_b = n.grad.data() + b * out_count;
            if (win.needs_grad || xin.needs_grad)
                detail::im2col(xin.value.data() + b * in_count, g, pad_mode, cols.data());
            if (win.needs_grad)
                detail::gemm_bt_acc(dout_b, cols.data(), win.grad_or_zeros().data(), g.c_out,
                                    out_plane, ckk);
            if (xin.needs_grad) {
                std::fill(dcols.begin(), dcols.end(), T(0));
                detail::gemm_at_acc(win.value.data(), dout_b, dcols.data(), g.c_out, ckk,
                                    out_plane);
                detail::col2im_acc(dcols.data(), g, pad_mode,
                                   xin.grad_or_zeros().data() + b * in_count);
            }
            if (has_bias && n.inputs[2]->needs_grad) {
                T* db = n.inputs[2]->grad_or_zeros().data();
                for (int c = 0; c < g.c_out; ++c) {
                    T acc = T(0);
                    for (std::int64_t i = 0; i < out_plane; ++i) acc += dout_b[c * out_plane + i];
                    db[c] += acc;
                }
            }
        }
    });
}

// Per-channel convolution; weight is (C,1,kH,kW).
template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& weight, int stride = 1, int pad = 0,
                        int dilation = 1, PadMode pad_mode = PadMode::zero) {
    if (x.value().rank() != 4) throw std::invalid_argument("depthwise_conv2d: input must be 4D");
    if (weight.value().rank() != 4 || weight.value().shape()[1] != 1)
        throw std::invalid_argument("depthwise_conv2d: weight must be (C,1,kH,kW)");
    if (weight.value().shape()[0] != x.value().shape()[1])
        throw std::invalid_argument("depthwise_conv2d: channel mismatch");
    const int batch = x.value().shape()[0], C = x.value().shape()[1];
    const int H = x.value().shape()[2], W = x.value().shape()[3];
    const int kh = weight.value().shape()[2], kw = weight.value().shape()[3];
    const int eff_kh = (kh - 1) * dilation + 1, eff_kw = (kw - 1) * dilation + 1;
    const int h_out = (H + 2 * pad - eff_kh) / stride + 1;
    const int w_out = (W + 2 * pad - eff_kw) / stride + 1;
    if (h_out < 1 || w_out < 1) throw std::invalid_argument("depthwise_conv2d: kernel does not fit");

    Tensor<T> out({batch, C, h_out, w_out});
    const auto* xd = x.value().data();
    const auto* wd = weight.value().data();
    auto* od = out.data();
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const std::int64_t oplane = static_cast<std::int64_t>(h_out) * w_out;
    for (int b = 0; b < batch; ++b) {
        for (int c = 0; c < C; ++c) {
            const T* xp = xd + (static_cast<std::int64_t>(b) * C + c) * plane;
            const T* wp = wd + static_cast<std::int64_t>(c) * kh * kw;
            T* op = od + (static_cast<std::int64_t>(b) * C + c) * oplane;
            for (int oh = 0; oh < h_out; ++oh) {
                for (int ow = 0; ow < w_out; ++ow) {
                    T acc = T(0);
                    for (int i = 0; i < kh; ++i) {
                        const int ih =
                            detail::pad_index(oh * stride - pad + i * dilation, H, pad_mode);
                        if (ih < 0) continue;
                        for (int j = 0; j < kw; ++j) {
                            const int iw =
                                detail::pad_index(ow * stride - pad + j * dilation, W, pad_mode);
                            if (iw < 0) continue;
                            acc += wp[i * kw + j] * xp[ih * W + iw];
                        }
                    }
                    op[oh * w_out + ow] = acc;
                }
            }
        }
    }

    return make_node<T>(
        std::move(out), {x, weight},
        [batch, C, H, W, kh, kw, stride, pad, dilation, pad_mode, h_out, w_out, plane,
         oplane](Node<T>& n) {
            auto& xin = *n.inputs[0];
            auto& win = *n.inputs[1];
            const T* xd = xin.value.data();
            const T* wd = win.value.data();
            for (int b = 0; b < batch; ++b) {
                for (int c = 0; c < C; ++c) {
                    const T* xp = xd + (static_cast<std::int64_t>(b) * C + c) * plane;
                    const T* wp = wd + static_cast<std::int64_t>(c) * kh * kw;
                    const T* gp = n.grad.data() + (static_cast<std::int64_t>(b) * C + c) * oplane;
                    T* dxp = xin.needs_grad
                                 ? xin.grad_or_zeros().data() +
                                       (static_cast<std::int64_t>(b) * C + c) * plane
                                 : nullptr;
                    T* dwp = win.needs_grad
                                 ? win.grad_or_zeros().data() + static_cast<std::int64_t>(c) * kh * kw
                                 : nullptr;
                    for (int oh = 0; oh < h_out; ++oh) {
                        for (int ow = 0; ow < w_out; ++ow) {
                            const T gv = gp[oh * w_out + ow];
                            if (gv == T(0)) continue;
                            for (int i = 0; i < kh; ++i) {
                                const int ih = detail::pad_index(oh * stride - pad + i * dilation,
                                                                 H, pad_mode);
                                if (ih < 0) continue;
                                for (int j = 0; j < kw; ++j) {
                                    const int iw = detail::pad_index(
                                        ow * stride - pad + j * dilation, W, pad_mode);
                                    if (iw < 0) continue;
                                    if (dxp) dxp[ih * W + iw] += wp[i * kw + j] * gv;
                                    if (dwp) dwp[i * kw + j] += xp[ih * W + iw] * gv;
                                }
                            }
                        }
                    }
                }
            }
        });
}

// Depthwise 3x3 followed by pointwise 1x1 with bias.
template <typename T>
Var<T> depthwise_separable_conv(const Var<T>& x, const Var<T>& dw_weight, const Var<T>& pw_weight,
                                const Var<T>& pw_bias, int stride = 1, int pad = 1,
                                int dilation = 1, PadMode pad_mode = PadMode::zero) {
    auto mid = depthwise_conv2d(x, dw_weight, stride, pad, dilation, pad_mode);
    return conv2d(mid, pw_weight, pw_bias, 1, 0, 1, pad_mode);
}

// Stride-s transpose convolution; weight is (Cin,Cout,kH,kW), output (B,Cout,(H-1)s+k,(W-1)s+k).
template <typename T>
Var<T> transpose_conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride) {
    if (x.value().rank() != 4) throw std::invalid_argument("transpose_conv2d: input must be 4D");
    if (weight.value().rank() != 4)
        throw std::invalid_argument("transpose_conv2d: weight must be (Cin,Cout,kH,kW)");
    if (weight.value().shape()[0] != x.value().shape()[1])
        throw std::invalid_argument("transpose_conv2d: channel mismatch");
    if (stride < 1) throw std::invalid_argument("transpose_conv2d: stride must be positive");
    const int batch = x.value().shape()[0], c_in = x.value().shape()[1];
    const int H = x.value().shape()[2], W = x.value().shape()[3];
    const int c_out = weight.value().shape()[1];
    const int kh = weight.value().shape()[2], kw = weight.value().shape()[3];
    const int h_out = (H - 1) * stride + kh, w_out = (W - 1) * stride + kw;
    if (bias.defined() && bias.value().size() != c_out)
        throw std::invalid_argument("transpose_conv2d: bias size mismatch");

    Tensor<T> out({batch, c_out, h_out, w_out});
    const std::int64_t iplane = static_cast<std::int64_t>(H) * W;
    const std::int64_t oplane = static_cast<std::int64_t>(h_out) * w_out;
    for (int b = 0; b < batch; ++b) {
        for (int ci = 0; ci < c_in; ++ci) {
            const T* xp = x.value().data() + (static_cast<std::int64_t>(b) * c_in + ci) * iplane;
            for (int co = 0; co < c_out; ++co) {
                const T* wp = weight.value().data() +
                              ((static_cast<std::int64_t>(ci) * c_out + co) * kh) * kw;
                T* op = out.data() + (static_cast<std::int64_t>(b) * c_out + co) * oplane;
                for (int h = 0; h < H; ++h) {
                    for (int w = 0; w < W; ++w) {
                        const T xv = xp[h * W + w];
                        if (xv == T(0)) continue;
                        for (int i = 0; i < kh; ++i)
                            for (int j = 0; j < kw; ++j)
                                op[(h * stride + i) * w_out + (w * stride + j)] +=
                                    xv * wp[i * kw + j];
                    }
                }
            }
        }
    }
    if (bias.defined()) {
        for (int b = 0; b < batch; ++b)
            for (int co = 0; co < c_out; ++co) {
                const T bv = bias.value()[co];
                T* op = out.data() + (static_cast<std::int64_t>(b) * c_out + co) * oplane;
                for (std::int64_t i = 0; i < oplane; ++i) op[i] += bv;
            }
    }

    std::vector<Var<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    const bool has_bias = bias.defined();
    return make_node<T>(
        std::move(out), inputs,
        [batch, c_in, c_out, H, W, kh, kw, stride, h_out, w_out, iplane, oplane,
         has_bias](Node<T>& n) {
            auto& xin = *n.inputs[0];
            auto& win = *n.inputs[1];
            for (int b = 0; b < batch; ++b) {
                for (int ci = 0; ci < c_in; ++ci) {
                    const T* xp = xin.value.data() + (static_cast<std::int64_t>(b) * c_in + ci) * iplane;
                    T* dxp = xin.needs_grad ? xin.grad_or_zeros().data() +
                                                  (static_cast<std::int64_t>(b) * c_in + ci) * iplane
                                            : nullptr;
                    for (int co = 0; co < c_out; ++co) {
                        const T* wp = win.value.data() +
                                      ((static_cast<std::int64_t>(ci) * c_out + co) * kh) * kw;
                        T* dwp = win.needs_grad
                                     ? win.grad_or_zeros().data() +
                                           ((static_cast<std::int64_t>(ci) * c_out + co) * kh) * kw
                                     : nullptr;
                        const T* gp =
                            n.grad.data() + (static_cast<std::int64_t>(b) * c_out + co) * oplane;
                        for (int h = 0; h < H; ++h) {
                            for (int w = 0; w < W; ++w) {
                                const T xv = xp[h * W + w];
                                T dx_acc = T(0);
                                for (int i = 0; i < kh; ++i) {
                                    for (int j = 0; j < kw; ++j) {
                                        const T gv =
                                            gp[(h * stride + i) * w_out + (w * stride + j)];
                                        dx_acc += gv * wp[i * kw + j];
                                        if (dwp) dwp[i * kw + j] += gv * xv;
                                    }
                                }
                                if (dxp) dxp[h * W + w] += dx_acc;
                            }
                        }
                    }
                }
            }
            if (has_bias && n.inputs[2]->needs_grad) {
                T* db = n.inputs[2]->grad_or_zeros().data();
                for (int b = 0; b < batch; ++b)
                    for (int co = 0; co < c_out; ++co) {
                        const T* gp =
                            n.grad.data() + (static_cast<std::int64_t>(b) * c_out + co) * oplane;
                        T acc = T(0);
                        for (std::int64_t i = 0; i < oplane; ++i) acc += gp[i];
                        db[co] += acc;
                    }
            }
        });
}

template <typename T>
struct BnStats {
    Tensor<T> running_mean;
    Tensor<T> running_var;

    explicit BnStats(int channels)
        : running_mean({channels}), running_var(Tensor<T>::full({channels}, T(1))) {}
};

// Batch normalization over (B,) or (B,H,W) per channel; population variance is
// used both for normalization and for the running-statistics update.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BnStats<T>& stats,
                  Mode mode, T momentum = T(0.1), T eps = T(1e-5)) {
    const auto& xs = x.value().shape();
    if (x.value().rank() != 2 && x.value().rank() != 4)
        throw std::invalid_argument("batch_norm: input must be (B,C) or (B,C,H,W)");
    const int batch = xs[0];
    const int C = xs[1];
    const std::int64_t plane = x.value().rank() == 4 ? static_cast<std::int64_t>(xs[2]) * xs[3] : 1;
    const std::int64_t per_channel = static_cast<std::int64_t>(batch) * plane;
    if (gamma.value().size() != C || beta.value().size() != C)
        throw std::invalid_argument("batch_norm: gamma/beta size mismatch");
    if (stats.running_mean.size() != C || stats.running_var.size() != C)
        throw std::invalid_argument("batch_norm: running stats size mismatch");
    if (mode == Mode::train && batch < 2)
        throw std::invalid_argument("batch_norm: training requires batch size >= 2");

    Tensor<T> mean({C}), var({C});
    if (mode == Mode::train) {
        for (int c = 0; c < C; ++c) {
            T acc = T(0);
            for (int b = 0; b < batch; ++b) {
                const T* xp = x.value().data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) acc += xp[i];
            }
            mean[c] = acc / static_cast<T>(per_channel);
            T vacc = T(0);
            for (int b = 0; b < batch; ++b) {
                const T* xp = x.value().data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    const T d = xp[i] - mean[c];
                    vacc += d * d;
                }
            }
            var[c] = vacc / static_cast<T>(per_channel);
        }
        for (int c = 0; c < C; ++c) {
            stats.running_mean[c] = (T(1) - momentum) * stats.running_mean[c] + momentum * mean[c];
            stats.running_var[c] = (T(1) - momentum) * stats.running_var[c] + momentum * var[c];
        }
    } else {
        mean = stats.running_mean;
        var = stats.running_var;
    }

    Tensor<T> out(x.value().shape());
    Tensor<T> inv_std({C});
    for (int c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);
    for (int b = 0; b < batch; ++b) {
        for (int c = 0; c < C; ++c) {
            const T* xp = x.value().data() + (static_cast<std::int64_t>(b) * C + c) * plane;
            T* op = out.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
            const T g = gamma.value()[c], bt = beta.value()[c], mu = mean[c], is = inv_std[c];
            for (std::int64_t i = 0; i < plane; ++i) op[i] = g * (xp[i] - mu) * is + bt;
        }
    }

    const bool train_stats = mode == Mode::train;
    return make_node<T>(
        std::move(out), {x, gamma, beta},
        [batch, C, plane, per_channel, mean, inv_std, train_stats](Node<T>& n) {
            auto& xin = *n.inputs[0];
            auto& gin = *n.inputs[1];
            auto& bin = *n.inputs[2];
            for (int c = 0; c < C; ++c) {
                const T mu = mean[c], is = inv_std[c], g = gin.value[c];
                T sum_dy = T(0), sum_dy_xhat = T(0);
                for (int b = 0; b < batch; ++b) {
                    const std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * plane;
                    const T* dy = n.grad.data() + off;
                    const T* xp = xin.value.data() + off;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        sum_dy += dy[i];
                        sum_dy_xhat += dy[i] * (xp[i] - mu) * is;
                    }
                }
                if (gin.needs_grad) gin.grad_or_zeros()[c] += sum_dy_xhat;
                if (bin.needs_grad) bin.grad_or_zeros()[c] += sum_dy;
                if (!xin.needs_grad) continue;
                const T mean_dy = sum_dy / static_cast<T>(per_channel);
                const T mean_dy_xhat = sum_dy_xhat / static_cast<T>(per_channel);
                for (int b = 0; b < batch; ++b) {
                    const std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * plane;
                    const T* dy = n.grad.data() + off;
                    const T* xp = xin.value.data() + off;
                    T* dx = xin.grad_or_zeros().data() + off;
                    if (train_stats) {
                        for (std::int64_t i = 0; i < plane; ++i) {
                            const T xhat = (xp[i] - mu) * is;
                            dx[i] += g * is * (dy[i] - mean_dy - xhat * mean_dy_xhat);
                        }
                    } else {
                        // Running statistics are constants.
                        for (std::int64_t i = 0; i < plane; ++i) dx[i] += g * is * dy[i];
                    }
                }
            }
        });
}

// Normalizes the last axis; gamma/beta have that axis's extent.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    if (x.value().rank() < 1) throw std::invalid_argument("layer_norm: input must have rank >= 1");
    const int D = x.value().shape().back();
    if (gamma.value().size() != D || beta.value().size() != D)
        throw std::invalid_argument("layer_norm: gamma/beta size mismatch");
    const std::int64_t rows = x.value().size() / D;

    Tensor<T> out(x.value().shape());
    Tensor<T> mean({static_cast<int>(rows)}), inv_std({static_cast<int>(rows)});
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xp = x.value().data() + r * D;
        T mu = T(0);
        for (int i = 0; i < D; ++i) mu += xp[i];
        mu /= static_cast<T>(D);
        T v = T(0);
        for (int i = 0; i < D; ++i) {
            const T d = xp[i] - mu;
            v += d * d;
        }
        v /= static_cast<T>(D);
        mean[r] = mu;
        inv_std[r] = T(1) / std::sqrt(v + eps);
        T* op = out.data() + r * D;
        for (int i = 0; i < D; ++i)
            op[i] = gamma.value()[i] * (xp[i] - mu) * inv_std[r] + beta.value()[i];
    }

    return make_node<T>(std::move(out), {x, gamma, beta}, [rows, D, mean, inv_std](Node<T>& n) {
        auto& xin = *n.inputs[0];
        auto& gin = *n.inputs[1];
        auto& bin = *n.inputs[2];
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* dy = n.grad.data() + r * D;
            const T* xp = xin.value.data() + r * D;
            const T mu = mean[r], is = inv_std[r];
            T sum_dyg = T(0), sum_dyg_xhat = T(0);
            for (int i = 0; i < D; ++i) {
                const T xhat = (xp[i] - mu) * is;
                const T dyg = dy[i] * gin.value[i];
                sum_dyg += dyg;
                sum_dyg_xhat += dyg * xhat;
                if (gin.needs_grad) gin.grad_or_zeros()[i] += dy[i] * xhat;
                if (bin.needs_grad) bin.grad_or_zeros()[i] += dy[i];
            }
            if (!xin.needs_grad) continue;
            T* dx = xin.grad_or_zeros().data() + r * D;
            const T mean_dyg = sum_dyg / static_cast<T>(D);
            const T mean_dyg_xhat = sum_dyg_xhat / static_cast<T>(D);
            for (int i = 0; i < D; ++i) {
                const T xhat = (xp[i] - mu) * is;
                dx[i] += is * (dy[i] * gin.value[i] - mean_dyg - xhat * mean_dyg_xhat);
            }
        }
    });
}

// Adds a vector over the last axis of x.
template <typename T>
Var<T> add_rowvec(const Var<T>& x, const Var<T>& b) {
    const int D = x.value().shape().back();
    if (b.value().size() != D) throw std::invalid_argument("add_rowvec: size mismatch");
    const std::int64_t rows = x.value().size() / D;
    Tensor<T> out(x.value().shape());
    for (std::int64_t r = 0; r < rows; ++r)
        for (int i = 0; i < D; ++i) out[r * D + i] = x.value()[r * D + i] + b.value()[i];
    return make_node<T>(std::move(out), {x, b}, [rows, D](Node<T>& n) {
        auto& xin = *n.inputs[0];
        auto& bin = *n.inputs[1];
        if (xin.needs_grad) {
            auto& dx = xin.grad_or_zeros();
            for (std::int64_t i = 0; i < n.grad.size(); ++i) dx[i] += n.grad[i];
        }
        if (bin.needs_grad) {
            auto& db = bin.grad_or_zeros();
            for (std::int64_t r = 0; r < rows; ++r)
                for (int i = 0; i < D; ++i) db[i] += n.grad[r * D + i];
        }
    });
}

// x (..., in) * w (in, out) + b; contraction over the last axis. Leading axes
// are flattened around a 2D matmul, so token sequences (B,T,C) work directly.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    if (x.value().rank() < 2) throw std::invalid_argument("linear: input must have rank >= 2");
    if (w.value().rank() != 2) throw std::invalid_argument("linear: weight must be 2D");
    if (x.value().shape().back() != w.value().shape()[0])
        throw std::invalid_argument("linear: feature size mismatch, input has " +
                                    std::to_string(x.value().shape().back()) + ", weight expects " +
                                    std::to_string(w.value().shape()[0]));
    const int in = x.value().shape().back();
    const int rows = static_cast<int>(x.value().size() / in);
    std::vector<int> out_shape = x.value().shape();
    out_shape.back() = w.value().shape()[1];
    auto y = reshape(matmul(reshape(x, {rows, in}), w), out_shape);
    return b.defined() ? add_rowvec(y, b) : y;
}

// Multiplies row b of x (B,D) by alpha[b]; alpha is (B) or (B,1).
template <typename T>
Var<T> scale_rows(const Var<T>& x, const Var<T>& alpha) {
    if (x.value().rank() != 2) throw std::invalid_argument("scale_rows: input must be (B,D)");
    const int B = x.value().shape()[0], D = x.value().shape()[1];
    if (alpha.value().size() != B)
        throw std::invalid_argument("scale_rows: need one factor per row");
    Tensor<T> out(x.value().shape());
    for (int b = 0; b < B; ++b)
        for (int d = 0; d < D; ++d) out.at(b, d) = x.value().at(b, d) * alpha.value()[b];
    return make_node<T>(std::move(out), {x, alpha}, [B, D](Node<T>& n) {
        auto& xin = *n.inputs[0];
        auto& ain = *n.inputs[1];
        for (int b = 0; b < B; ++b) {
            const T a = ain.value[b];
            if (xin.needs_grad) {
                T* dx = xin.grad_or_zeros().data() + static_cast<std::int64_t>(b) * D;
                const T* dy = n.grad.data() + static_cast<std::int64_t>(b) * D;
                for (int d = 0; d < D; ++d) dx[d] += dy[d] * a;
            }
            if (ain.needs_grad) {
                T acc = T(0);
                const T* dy = n.grad.data() + static_cast<std::int64_t>(b) * D;
                const T* xv = xin.value.data() + static_cast<std::int64_t>(b) * D;
                for (int d = 0; d < D; ++d) acc += dy[d] * xv[d];
                ain.grad_or_zeros()[b] += acc;
            }
        }
    });
}

// Inverted dropout: scales kept activations by 1/(1-rate) at train time.
template <typename T>
Var<T> dropout(const Var<T>& x, T rate, Mode mode, SeededRng& rng) {
    if (rate < T(0) || rate >= T(1)) throw std::invalid_argument("dropout: rate must be in [0,1)");
    if (mode == Mode::infer || rate == T(0)) return x;
    const T keep = T(1) - rate;
    Tensor<T> mask(x.value().shape());
    for (std::int64_t i = 0; i < mask.size(); ++i)
        mask[i] = rng.next_bernoulli(static_cast<double>(keep)) ? T(1) / keep : T(0);
    Tensor<T> out(x.value().shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * mask[i];
    return make_node<T>(std::move(out), {x}, [mask](Node<T>& n) {
        auto& xin = *n.inputs[0];
        if (!xin.needs_grad) return;
        auto& dx = xin.grad_or_zeros();
        for (std::int64_t i = 0; i < n.grad.size(); ++i) dx[i] += n.grad[i] * mask[i];
    });
}

// (B,C,H,W) -> (B,C) mean over H,W; (B,N,C) -> (B,C) mean over N.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    const auto& s = x.value().shape();
    if (x.value().rank() == 4) {
        const int B = s[0], C = s[1];
        const std::int64_t plane = static_cast<std::int64_t>(s[2]) * s[3];
        Tensor<T> out({B, C});
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                const T* xp = x.value().data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                T acc = T(0);
                for (std::int64_t i = 0; i < plane; ++i) acc += xp[i];
                out.at(b, c) = acc / static_cast<T>(plane);
            }
        return make_node<T>(std::move(out), {x}, [B, C, plane](Node<T>& n) {
            auto& xin = *n.inputs[0];
            if (!xin.needs_grad) return;
            auto& dx = xin.grad_or_zeros();
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const T g = n.grad.at(b, c) / static_cast<T>(plane);
                    T* dxp = dx.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) dxp[i] += g;
                }
        });
    }
    if (x.value().rank() == 3) {
        const int B = s[0], N = s[1], C = s[2];
        Tensor<T> out({B, C});
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                T acc = T(0);
                for (int t = 0; t < N; ++t) acc += x.value().at(b, t, c);
                out.at(b, c) = acc / static_cast<T>(N);
            }
        return make_node<T>(std::move(out), {x}, [B, N, C](Node<T>& n) {
            auto& xin = *n.inputs[0];
            if (!xin.needs_grad) return;
            auto& dx = xin.grad_or_zeros();
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const T g = n.grad.at(b, c) / static_cast<T>(N);
                    for (int t = 0; t < N; ++t)
                        dx[(static_cast<std::int64_t>(b) * N + t) * C + c] += g;
                }
        });
    }
    throw std::invalid_argument("global_avg_pool: input must be 3D or 4D");
}

// Multiplies every channel of x (B,C,H,W) by a one-channel mask (B,1,H,W).
template <typename T>
Var<T> mul_bcast_channel(const Var<T>& x, const Var<T>& mask) {
    const auto& xs = x.value().shape();
    const auto& ms = mask.value().shape();
    if (x.value().rank() != 4 || mask.value().rank() != 4 || ms[1] != 1 || ms[0] != xs[0] ||
        ms[2] != xs[2] || ms[3] != xs[3])
        throw std::invalid_argument("mul_bcast_channel: mask must be (B,1,H,W) matching input");
    const int B = xs[0], C = xs[1];
    const std::int64_t plane = static_cast<std::int64_t>(xs[2]) * xs[3];
    Tensor<T> out(xs);
    for (int b = 0; b < B; ++b) {
        const T* mp = mask.value().data() + static_cast<std::int64_t>(b) * plane;
        for (int c = 0; c < C; ++c) {
            const std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) out[off + i] = x.value()[off + i] * mp[i];
        }
    }
    return make_node<T>(std::move(out), {x, mask}, [B, C, plane](Node<T>& n) {
        auto& xin = *n.inputs[0];
        auto& min = *n.inputs[1];
        for (int b = 0; b < B; ++b) {
            const T* mp = min.value.data() + static_cast<std::int64_t>(b) * plane;
            T* dmp = min.needs_grad
                         ? min.grad_or_zeros().data() + static_cast<std::int64_t>(b) * plane
                         : nullptr;
            for (int c = 0; c < C; ++c) {
                const std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    if (xin.needs_grad) xin.grad_or_zeros()[off + i] += n.grad[off + i] * mp[i];
                    if (dmp) dmp[i] += n.grad[off + i] * xin.value[off + i];
                }
            }
        }
    });
}

namespace detail {

struct BilinearTap {
    int lo, hi;
    double frac;
};

inline std::vector<BilinearTap> bilinear_taps(int src, int dst) {
    std::vector<BilinearTap> taps(dst);
    const double scale = static_cast<double>(src) / dst;
    for (int d = 0; d < dst; ++d) {
        double s = (d + 0.5) * scale - 0.5;
        if (s < 0.0) s = 0.0;
        if (s > src - 1) s = src - 1;
        const int lo = static_cast<int>(s);
        taps[d] = {lo, lo + 1 < src ? lo + 1 : lo, s - lo};
    }
    return taps;
}

}  // namespace detail

// Resizes (B,C,H,W) to (B,C,out_h,out_w); half-pixel source mapping with edge clamping.
template <typename T>
Var<T> bilinear_upsample(const Var<T>& x, int out_h, int out_w) {
    if (x.value().rank() != 4) throw std::invalid_argument("bilinear_upsample: input must be 4D");
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("bilinear_upsample: bad output size");
    const auto& s = x.value().shape();
    const int B = s[0], C = s[1], H = s[2], W = s[3];
    const auto ty = detail::bilinear_taps(H, out_h);
    const auto tx = detail::bilinear_taps(W, out_w);

    Tensor<T> out({B, C, out_h, out_w});
    const std::int64_t iplane = static_cast<std::int64_t>(H) * W;
    const std::int64_t oplane = static_cast<std::int64_t>(out_h) * out_w;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const T* xp = x.value().data() + (static_cast<std::int64_t>(b) * C + c) * iplane;
            T* op = out.data() + (static_cast<std::int64_t>(b) * C + c) * oplane;
            for (int oy = 0; oy < out_h; ++oy) {
                const auto& yt = ty[oy];
                for (int ox = 0; ox < out_w; ++ox) {
                    const auto& xt = tx[ox];
                    const T v00 = xp[yt.lo * W + xt.lo], v01 = xp[yt.lo * W + xt.hi];
                    const T v10 = xp[yt.hi * W + xt.lo], v11 = xp[yt.hi * W + xt.hi];
                    const T top = v00 + static_cast<T>(xt.frac) * (v01 - v00);
                    const T bot = v10 + static_cast<T>(xt.frac) * (v11 - v10);
                    op[oy * out_w + ox] = top + static_cast<T>(yt.frac) * (bot - top);
                }
            }
        }

    return make_node<T>(std::move(out), {x}, [B, C, H, W, out_h, out_w, ty, tx, iplane,
                                             oplane](Node<T>& n) {
        auto& xin = *n.inputs[0];
        if (!xin.needs_grad) return;
        auto& dx = xin.grad_or_zeros();
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                T* dxp = dx.data() + (static_cast<std::int64_t>(b) * C + c) * iplane;
                const T* gp = n.grad.data() + (static_cast<std::int64_t>(b) * C + c) * oplane;
                for (int oy = 0; oy < out_h; ++oy) {
                    const auto& yt = ty[oy];
                    const T wy1 = static_cast<T>(yt.frac), wy0 = T(1) - wy1;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const auto& xt = tx[ox];
                        const T g = gp[oy * out_w + ox];
                        const T wx1 = static_cast<T>(xt.frac), wx0 = T(1) - wx1;
                        dxp[yt.lo * W + xt.lo] += g * wy0 * wx0;
                        dxp[yt.lo * W + xt.hi] += g * wy0 * wx1;
                        dxp[yt.hi * W + xt.lo] += g * wy1 * wx0;
                        dxp[yt.hi * W + xt.hi] += g * wy1 * wx1;
                    }
                }
            }
    });
}

}  // namespace derma::nn
