#pragma once

// Dual-branch lesion classifier: two independent conv token encoders (original
// and segmented streams), multi-head cross-attention where the original stream
// supplies queries and values and the segmented stream supplies keys, a
// two-layer tabular embedding gated by a per-sample availability mask, additive
// fusion, and a 512/128 classifier head.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "derma/autodiff.hpp"
#include "derma/nn.hpp"
#include "derma/params.hpp"
#include "derma/rng.hpp"
#include "derma/tensor.hpp"

namespace derma {

struct ClsConfig {
    int input_side = 224;
    int in_channels = 3;
    // Stride-2 stages; the last entry is the token channel count C.
    std::vector<int> encoder_channels{64, 128, 256, 512, 1920};
    int channels = 1920;
    int grid_side = 7;
    int heads = 8;
    int ffn_expansion = 2;
    int tabular_dim = 12;
    std::vector<int> tabular_hidden{64, 128};
    std::vector<int> head_hidden{512, 128};
    int num_classes = 7;
    double dropout = 0.3;

    int stages() const { return static_cast<int>(encoder_channels.size()); }
    int tokens() const { return grid_side * grid_side; }

    void validate() const {
        if (in_channels < 1 || channels < 1 || grid_side < 1)
            throw std::invalid_argument("ClsConfig: bad extents");
        if (encoder_channels.empty() || encoder_channels.back() != channels)
            throw std::invalid_argument("ClsConfig: encoder must end at the token channel count");
        if (heads < 1 || channels % heads != 0)
            throw std::invalid_argument("ClsConfig: channel count must be divisible by head count");
        if (input_side != grid_side << stages())
            throw std::invalid_argument("ClsConfig: input side " + std::to_string(input_side) +
                                        " does not reduce to grid side " +
                                        std::to_string(grid_side) + " over " +
                                        std::to_string(stages()) + " stride-2 stages");
        if (ffn_expansion < 1) throw std::invalid_argument("ClsConfig: bad FFN expansion");
        if (tabular_dim < 1 || tabular_hidden.size() != 2)
            throw std::invalid_argument("ClsConfig: tabular net is two layers");
        if (head_hidden.size() != 2) throw std::invalid_argument("ClsConfig: head is two hidden layers");
        if (num_classes < 2) throw std::invalid_argument("ClsConfig: need at least two classes");
        if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("ClsConfig: bad dropout");
    }

    /// 64-pixel configuration sized for CPU training.
    static ClsConfig desk() {
        ClsConfig c;
        c.input_side = 64;
        c.encoder_channels = {16, 32, 64, 128};
        c.channels = 128;
        c.grid_side = 4;
        c.heads = 4;
        c.num_classes = 3;
        return c;
    }

    /// Smallest config exercising every block; used for gradient checks.
    static ClsConfig tiny() {
        ClsConfig c;
        c.input_side = 16;
        c.encoder_channels = {4, 6, 8};
        c.channels = 8;
        c.grid_side = 2;
        c.heads = 2;
        c.tabular_dim = 4;
        c.tabular_hidden = {4, 6};
        c.head_hidden = {10, 6};
        c.num_classes = 3;
        c.dropout = 0.0;
        return c;
    }
};

/// Encoded metadata for a batch: feature rows plus the availability mask.
template <typename T>
struct MetadataBatch {
    Tensor<T> features;  // (B, tabular_dim)
    Tensor<T> alpha;     // (B), entries in {0,1}
};

template <typename T>
struct MhcaParams {
    Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Scaled dot-product cross-attention over token sequences (B,T,C).
/// Per head: d_k = C/h, weights = softmax(Q Kᵀ / sqrt(d_k)), output =
/// weights · V; heads are concatenated and output-projected. `attn_out`, when
/// given, receives the (B,h,T,T) weight tensor.
template <typename T>
Var<T> mhca(const Var<T>& q_tokens, const Var<T>& k_tokens, const Var<T>& v_tokens,
            const MhcaParams<T>& p, int heads, Var<T>* attn_out = nullptr) {
    const auto& qs = q_tokens.value().shape();
    if (q_tokens.value().rank() != 3) throw std::invalid_argument("mhca: tokens must be (B,T,C)");
    if (!q_tokens.value().same_shape(k_tokens.value()) ||
        !q_tokens.value().same_shape(v_tokens.value()))
        throw std::invalid_argument("mhca: token-count mismatch between streams");
    const int B = qs[0], Tn = qs[1], C = qs[2];
    if (heads < 1 || C % heads != 0)
        throw std::invalid_argument("mhca: channels not divisible by heads");
    const int dk = C / heads;

    auto split_heads = [&](Var<T> x) {
        return permute(reshape(x, {B, Tn, heads, dk}), {0, 2, 1, 3});  // (B,h,T,dk)
    };
    auto qh = split_heads(nn::linear(q_tokens, p.wq, p.bq));
    auto kh = split_heads(nn::linear(k_tokens, p.wk, p.bk));
    auto vh = split_heads(nn::linear(v_tokens, p.wv, p.bv));
    auto logits = scale(matmul(qh, permute(kh, {0, 1, 3, 2})),
                        static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk))));
    auto attn = softmax(logits, 3);
    if (attn_out) *attn_out = attn;
    auto ctx = reshape(permute(matmul(attn, vh), {0, 2, 1, 3}), {B, Tn, C});
    return nn::linear(ctx, p.wo, p.bo);
}

/// F = F_vision + alpha * F_tabular, rows gated per sample.
template <typename T>
Var<T> fuse(const Var<T>& f_vision, const Var<T>& f_tabular, const Var<T>& alpha) {
    if (!f_vision.value().same_shape(f_tabular.value()))
        throw std::invalid_argument("fuse: dimension mismatch");
    return add(f_vision, nn::scale_rows(f_tabular, alpha));
}

template <typename T>
struct ClsTrace {
    Var<T> logits;
    Var<T> orig_feature_map;  // (B,C,g,g) pre-token map of the original stream
    Var<T> seg_feature_map;   // (B,C,g,g) pre-token map of the segmented stream
    Var<T> attention;         // (B,h,T,T) cross-attention weights
};

template <typename T>
class TdbnClassifier {
public:
    TdbnClassifier(ClsConfig cfg, SeededRng& rng) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const int C = cfg_.channels;
        build_encoder(enc_orig_, rng);
        build_encoder(enc_seg_, rng);

        auto attn_proj = [&rng, C]() {
            return Var<T>::leaf(nn::xavier_uniform<T>({C, C}, C, C, rng), true);
        };
        mhca_ = {attn_proj(), zeros_leaf(C), attn_proj(), zeros_leaf(C),
                 attn_proj(), zeros_leaf(C), attn_proj(), zeros_leaf(C)};
        ln1_ = make_ln(C);
        ln2_ = make_ln(C);
        const int ffn_dim = C * cfg_.ffn_expansion;
        ffn1_ = make_linear(C, ffn_dim, rng, true);
        ffn2_ = make_linear(ffn_dim, C, rng, false);
        vis_proj_ = make_proj(C, C, rng);

        tab1_ = make_linear(cfg_.tabular_dim, cfg_.tabular_hidden[0], rng, true);
        tab_bn1_ = Bn(cfg_.tabular_hidden[0]);
        tab2_ = make_linear(cfg_.tabular_hidden[0], cfg_.tabular_hidden[1], rng, true);
        tab_bn2_ = Bn(cfg_.tabular_hidden[1]);
        tab_proj_ = make_proj(cfg_.tabular_hidden[1], C, rng);

        head1_ = make_linear(C, cfg_.head_hidden[0], rng, true);
        head_bn1_ = Bn(cfg_.head_hidden[0]);
        head2_ = make_linear(cfg_.head_hidden[0], cfg_.head_hidden[1], rng, true);
        head_bn2_ = Bn(cfg_.head_hidden[1]);
        head_out_ = make_linear(cfg_.head_hidden[1], cfg_.num_classes, rng, false);
    }

    const ClsConfig& config() const { return cfg_; }

    /// Final conv feature map (B,C,g,g) of one stream (0 = original,
    /// 1 = segmented). This is the map explanation heatmaps attach to.
    Var<T> encode_feature_map(const Var<T>& images, int stream, nn::Mode mode,
                              nn::PadMode pad = nn::PadMode::zero) {
        const auto& s = images.value().shape();
        if (images.value().rank() != 4 || s[1] != cfg_.in_channels || s[2] != cfg_.input_side ||
            s[3] != cfg_.input_side)
            throw std::invalid_argument("encode_feature_map: input must be (B," +
                                        std::to_string(cfg_.in_channels) + "," +
                                        std::to_string(cfg_.input_side) + "," +
                                        std::to_string(cfg_.input_side) + ")");
        auto& enc = stream == 0 ? enc_orig_ : enc_seg_;
        Var<T> cur = images;
        for (auto& st : enc)
            cur = relu(nn::batch_norm(nn::conv2d(cur, st.conv.w, st.conv.b, 2, 1, 1, pad),
                                      st.bn.gamma, st.bn.beta, st.bn.stats, mode));
        return cur;
    }

    /// (B,C,g,g) -> (B, g*g, C), spatial positions flattened row-major.
    Var<T> tokens_from_map(const Var<T>& feature_map) {
        const auto& s = feature_map.value().shape();
        return permute(reshape(feature_map, {s[0], s[1], s[2] * s[3]}), {0, 2, 1});
    }

    Var<T> encode_tokens(const Var<T>& images, int stream, nn::Mode mode,
                         nn::PadMode pad = nn::PadMode::zero) {
        return tokens_from_map(encode_feature_map(images, stream, mode, pad));
    }

    /// Z = LayerNorm(Q + MHCA), Zhat = LayerNorm(Z + FFN(Z)), pooled over
    /// tokens, then the vision projection.
    Var<T> cross_fusion_block(const Var<T>& q_tokens, const Var<T>& k_tokens,
                              const Var<T>& v_tokens, nn::Mode mode, SeededRng* drop_rng,
                              Var<T>* attn_out = nullptr) {
        auto attended = mhca(q_tokens, k_tokens, v_tokens, mhca_, cfg_.heads, attn_out);
        auto z = nn::layer_norm(add(q_tokens, attended), ln1_.gamma, ln1_.beta);
        auto ffn = nn::linear(relu(nn::linear(z, ffn1_.w, ffn1_.b)), ffn2_.w, ffn2_.b);
        auto zhat = nn::layer_norm(add(z, ffn), ln2_.gamma, ln2_.beta);
        return apply_proj(nn::global_avg_pool(zhat), vis_proj_, mode, drop_rng);
    }

    /// Gated embedding: E = BN(ReLU(W2 BN(ReLU(W1 x)))) scaled per row by
    /// alpha, so a masked sample's row is exactly zero.
    Var<T> gated_tabular(const Var<T>& features, const Var<T>& alpha, nn::Mode mode) {
        if (features.value().rank() != 2 || features.value().shape()[1] != cfg_.tabular_dim)
            throw std::invalid_argument("gated_tabular: features must be (B," +
                                        std::to_string(cfg_.tabular_dim) + ")");
        auto h1 = nn::batch_norm(relu(nn::linear(features, tab1_.w, tab1_.b)), tab_bn1_.gamma,
                                 tab_bn1_.beta, tab_bn1_.stats, mode);
        auto e = nn::batch_norm(relu(nn::linear(h1, tab2_.w, tab2_.b)), tab_bn2_.gamma,
                                tab_bn2_.beta, tab_bn2_.stats, mode);
        return nn::scale_rows(e, alpha);
    }

    /// Gated embedding projected to the fusion width C. The projection's batch
    /// norm can move masked rows off zero, which is why fusion applies alpha a
    /// second time.
    Var<T> tabular_embedding(const Var<T>& features, const Var<T>& alpha, nn::Mode mode,
                             SeededRng* drop_rng) {
        return apply_proj(gated_tabular(features, alpha, mode), tab_proj_, mode, drop_rng);
    }

    /// C -> 512 -> 128 -> logits, BN + ReLU + dropout after each hidden layer.
    Var<T> classifier_head(const Var<T>& fused, nn::Mode mode, SeededRng* drop_rng) {
        if (fused.value().rank() != 2 || fused.value().shape()[1] != cfg_.channels)
            throw std::invalid_argument("classifier_head: input must be (B," +
                                        std::to_string(cfg_.channels) + ")");
        auto h1 = apply_dropout(
            relu(nn::batch_norm(nn::linear(fused, head1_.w, head1_.b), head_bn1_.gamma,
                                head_bn1_.beta, head_bn1_.stats, mode)),
            mode, drop_rng);
        auto h2 = apply_dropout(
            relu(nn::batch_norm(nn::linear(h1, head2_.w, head2_.b), head_bn2_.gamma,
                                head_bn2_.beta, head_bn2_.stats, mode)),
            mode, drop_rng);
        return nn::linear(h2, head_out_.w, head_out_.b);
    }

    /// Full forward pass with intermediate tensors exposed for explanation.
    ClsTrace<T> forward_traced(const Var<T>& original, const Var<T>& segmented,
                               const MetadataBatch<T>& meta, nn::Mode mode,
                               SeededRng* drop_rng = nullptr,
                               nn::PadMode pad = nn::PadMode::zero) {
        if (!original.value().same_shape(segmented.value()))
            throw std::invalid_argument("tdbn_forward: stream batch mismatch");
        const int B = original.value().shape()[0];
        if (meta.features.rank() != 2 || meta.features.shape()[0] != B ||
            meta.alpha.size() != B)
            throw std::invalid_argument("tdbn_forward: metadata batch mismatch");
        ClsTrace<T> trace;
        trace.orig_feature_map = encode_feature_map(original, 0, mode, pad);
        trace.seg_feature_map = encode_feature_map(segmented, 1, mode, pad);
        auto tok_o = tokens_from_map(trace.orig_feature_map);
        auto tok_s = tokens_from_map(trace.seg_feature_map);
        auto f_vision =
            cross_fusion_block(tok_o, tok_s, tok_o, mode, drop_rng, &trace.attention);
        auto alpha = Var<T>::leaf(meta.alpha);
        auto features = Var<T>::leaf(meta.features);
        auto f_tabular = tabular_embedding(features, alpha, mode, drop_rng);
        auto fused = fuse(f_vision, f_tabular, alpha);
        trace.logits = classifier_head(fused, mode, drop_rng);
        return trace;
    }

    Var<T> forward(const Tensor<T>& original, const Tensor<T>& segmented,
                   const MetadataBatch<T>& meta, nn::Mode mode, SeededRng* drop_rng = nullptr) {
        return forward_traced(Var<T>::leaf(original), Var<T>::leaf(segmented), meta, mode, drop_rng)
            .logits;
    }

    MhcaParams<T>& attention_params() { return mhca_; }

    NamedParams<T> params() {
        NamedParams<T> out;
        for_each_named([&out](const std::string& n, Var<T> v) { out.emplace_back(n, v); },
                       [](const std::string&, Tensor<T>*) {});
        return out;
    }
    NamedBuffers<T> buffers() {
        NamedBuffers<T> out;
        for_each_named([](const std::string&, Var<T>) {},
                       [&out](const std::string& n, Tensor<T>* t) { out.emplace_back(n, t); });
        return out;
    }

private:
    struct Conv {
        Var<T> w, b;
    };
    struct Bn {
        Var<T> gamma, beta;
        nn::BnStats<T> stats;
        Bn() : stats(1) {}
        explicit Bn(int ch)
            : gamma(Var<T>::leaf(Tensor<T>::full({ch}, T(1)), true)),
              beta(Var<T>::leaf(Tensor<T>({ch}), true)),
              stats(ch) {}
    };
    struct ConvBn {
        Conv conv;
        Bn bn;
    };
    struct LinearP {
        Var<T> w, b;
    };
    struct Ln {
        Var<T> gamma, beta;
    };
    struct Proj {
        LinearP fc;
        Bn bn;
    };

    static Var<T> zeros_leaf(int n) { return Var<T>::leaf(Tensor<T>({n}), true); }

    LinearP make_linear(int in, int out, SeededRng& rng, bool feeds_relu) {
        Tensor<T> w = feeds_relu ? nn::kaiming_uniform<T>({in, out}, in, rng)
                                 : nn::xavier_uniform<T>({in, out}, in, out, rng);
        return {Var<T>::leaf(std::move(w), true), zeros_leaf(out)};
    }
    Ln make_ln(int ch) {
        return {Var<T>::leaf(Tensor<T>::full({ch}, T(1)), true), zeros_leaf(ch)};
    }
    Proj make_proj(int in, int out, SeededRng& rng) {
        return {make_linear(in, out, rng, true), Bn(out)};
    }
    void build_encoder(std::vector<ConvBn>& enc, SeededRng& rng) {
        int c_prev = cfg_.in_channels;
        for (int ch : cfg_.encoder_channels) {
            const std::int64_t fan_in = static_cast<std::int64_t>(c_prev) * 9;
            ConvBn st{Conv{Var<T>::leaf(nn::kaiming_uniform<T>({ch, c_prev, 3, 3}, fan_in, rng),
                                        true),
                           zeros_leaf(ch)},
                      Bn(ch)};
            enc.push_back(std::move(st));
            c_prev = ch;
        }
    }
    Var<T> apply_dropout(const Var<T>& x, nn::Mode mode, SeededRng* rng) {
        if (mode == nn::Mode::infer || cfg_.dropout == 0.0) return x;
        if (!rng) throw std::invalid_argument("dropout in training mode needs an rng");
        return nn::dropout(x, static_cast<T>(cfg_.dropout), mode, *rng);
    }
    Var<T> apply_proj(const Var<T>& x, Proj& p, nn::Mode mode, SeededRng* rng) {
        auto h = relu(nn::batch_norm(nn::linear(x, p.fc.w, p.fc.b), p.bn.gamma, p.bn.beta,
                                     p.bn.stats, mode));
        return apply_dropout(h, mode, rng);
    }

    template <typename PF, typename BF>
    void visit_bn(const std::string& prefix, Bn& bn, PF&& pf, BF&& bf) {
        pf(prefix + ".gamma", bn.gamma);
        pf(prefix + ".beta", bn.beta);
        bf(prefix + ".running_mean", &bn.stats.running_mean);
        bf(prefix + ".running_var", &bn.stats.running_var);
    }
    template <typename PF, typename BF>
    void visit_encoder(const std::string& prefix, std::vector<ConvBn>& enc, PF&& pf, BF&& bf) {
        for (std::size_t s = 0; s < enc.size(); ++s) {
            const std::string p = prefix + "." + std::to_string(s);
            pf(p + ".conv.w", enc[s].conv.w);
            pf(p + ".conv.b", enc[s].conv.b);
            visit_bn(p + ".bn", enc[s].bn, pf, bf);
        }
    }
    template <typename PF, typename BF>
    void visit_proj(const std::string& prefix, Proj& proj, PF&& pf, BF&& bf) {
        pf(prefix + ".w", proj.fc.w);
        pf(prefix + ".b", proj.fc.b);
        visit_bn(prefix + ".bn", proj.bn, pf, bf);
    }

    template <typename PF, typename BF>
    void for_each_named(PF pf, BF bf) {
        visit_encoder("enc_orig", enc_orig_, pf, bf);
        visit_encoder("enc_seg", enc_seg_, pf, bf);
        pf("mhca.wq", mhca_.wq);
        pf("mhca.bq", mhca_.bq);
        pf("mhca.wk", mhca_.wk);
        pf("mhca.bk", mhca_.bk);
        pf("mhca.wv", mhca_.wv);
        pf("mhca.bv", mhca_.bv);
        pf("mhca.wo", mhca_.wo);
        pf("mhca.bo", mhca_.bo);
        pf("ln1.gamma", ln1_.gamma);
        pf("ln1.beta", ln1_.beta);
        pf("ln2.gamma", ln2_.gamma);
        pf("ln2.beta", ln2_.beta);
        pf("ffn.w1", ffn1_.w);
        pf("ffn.b1", ffn1_.b);
        pf("ffn.w2", ffn2_.w);
        pf("ffn.b2", ffn2_.b);
        visit_proj("vis_proj", vis_proj_, pf, bf);
        pf("tab.w1", tab1_.w);
        pf("tab.b1", tab1_.b);
        visit_bn("tab.bn1", tab_bn1_, pf, bf);
        pf("tab.w2", tab2_.w);
        pf("tab.b2", tab2_.b);
        visit_bn("tab.bn2", tab_bn2_, pf, bf);
        visit_proj("tab_proj", tab_proj_, pf, bf);
        pf("head.fc1.w", head1_.w);
        pf("head.fc1.b", head1_.b);
        visit_bn("head.bn1", head_bn1_, pf, bf);
        pf("head.fc2.w", head2_.w);
        pf("head.fc2.b", head2_.b);
        visit_bn("head.bn2", head_bn2_, pf, bf);
        pf("head.out.w", head_out_.w);
        pf("head.out.b", head_out_.b);
    }

    ClsConfig cfg_;
    std::vector<ConvBn> enc_orig_, enc_seg_;
    MhcaParams<T> mhca_;
    Ln ln1_, ln2_;
    LinearP ffn1_, ffn2_;
    Proj vis_proj_;
    LinearP tab1_, tab2_;
    Bn tab_bn1_, tab_bn2_;
    Proj tab_proj_;
    LinearP head1_, head2_;
    Bn head_bn1_, head_bn2_;
    LinearP head_out_;
};

/// Ablation baseline: one encoder stream, token pooling, and the same
/// classifier head; no attention, no metadata.
template <typename T>
class SingleBranchClassifier {
public:
    SingleBranchClassifier(ClsConfig cfg, SeededRng& rng) : cfg_(std::move(cfg)) {
        cfg_.validate();
        int c_prev = cfg_.in_channels;
        for (int ch : cfg_.encoder_channels) {
            const std::int64_t fan_in = static_cast<std::int64_t>(c_prev) * 9;
            enc_.push_back(ConvBn{
                Conv{Var<T>::leaf(nn::kaiming_uniform<T>({ch, c_prev, 3, 3}, fan_in, rng), true),
                     Var<T>::leaf(Tensor<T>({ch}), true)},
                Bn(ch)});
            c_prev = ch;
        }
        head1_ = make_linear(cfg_.channels, cfg_.head_hidden[0], rng, true);
        head_bn1_ = Bn(cfg_.head_hidden[0]);
        head2_ = make_linear(cfg_.head_hidden[0], cfg_.head_hidden[1], rng, true);
        head_bn2_ = Bn(cfg_.head_hidden[1]);
        head_out_ = make_linear(cfg_.head_hidden[1], cfg_.num_classes, rng, false);
    }

    const ClsConfig& config() const { return cfg_; }

    Var<T> encode_feature_map(const Var<T>& images, nn::Mode mode,
                              nn::PadMode pad = nn::PadMode::zero) {
        const auto& s = images.value().shape();
        if (images.value().rank() != 4 || s[1] != cfg_.in_channels || s[2] != cfg_.input_side ||
            s[3] != cfg_.input_side)
            throw std::invalid_argument("encode_feature_map: bad input shape");
        Var<T> cur = images;
        for (auto& st : enc_)
            cur = relu(nn::batch_norm(nn::conv2d(cur, st.conv.w, st.conv.b, 2, 1, 1, pad),
                                      st.bn.gamma, st.bn.beta, st.bn.stats, mode));
        return cur;
    }

    struct Trace {
        Var<T> logits;
        Var<T> feature_map;
    };

    Trace forward_traced(const Var<T>& images, nn::Mode mode, SeededRng* drop_rng = nullptr) {
        Trace t;
        t.feature_map = encode_feature_map(images, mode);
        auto pooled = nn::global_avg_pool(t.feature_map);  // (B,C)
        auto h1 = apply_dropout(
            relu(nn::batch_norm(nn::linear(pooled, head1_.w, head1_.b), head_bn1_.gamma,
                                head_bn1_.beta, head_bn1_.stats, mode)),
            mode, drop_rng);
        auto h2 = apply_dropout(
            relu(nn::batch_norm(nn::linear(h1, head2_.w, head2_.b), head_bn2_.gamma,
                                head_bn2_.beta, head_bn2_.stats, mode)),
            mode, drop_rng);
        t.logits = nn::linear(h2, head_out_.w, head_out_.b);
        return t;
    }

    Var<T> forward(const Tensor<T>& images, nn::Mode mode, SeededRng* drop_rng = nullptr) {
        return forward_traced(Var<T>::leaf(images), mode, drop_rng).logits;
    }

    NamedParams<T> params() {
        NamedParams<T> out;
        for_each_named([&out](const std::string& n, Var<T> v) { out.emplace_back(n, v); },
                       [](const std::string&, Tensor<T>*) {});
        return out;
    }
    NamedBuffers<T> buffers() {
        NamedBuffers<T> out;
        for_each_named([](const std::string&, Var<T>) {},
                       [&out](const std::string& n, Tensor<T>* t) { out.emplace_back(n, t); });
        return out;
    }

private:
    struct Conv {
        Var<T> w, b;
    };
    struct Bn {
        Var<T> gamma, beta;
        nn::BnStats<T> stats;
        Bn() : stats(1) {}
        explicit Bn(int ch)
            : gamma(Var<T>::leaf(Tensor<T>::full({ch}, T(1)), true)),
              beta(Var<T>::leaf(Tensor<T>({ch}), true)),
              stats(ch) {}
    };
    struct ConvBn {
        Conv conv;
        Bn bn;
    };
    struct LinearP {
        Var<T> w, b;
    };

    LinearP make_linear(int in, int out, SeededRng& rng, bool feeds_relu) {
        Tensor<T> w = feeds_relu ? nn::kaiming_uniform<T>({in, out}, in, rng)
                                 : nn::xavier_uniform<T>({in, out}, in, out, rng);
        return {Var<T>::leaf(std::move(w), true), Var<T>::leaf(Tensor<T>({out}), true)};
    }
    Var<T> apply_dropout(const Var<T>& x, nn::Mode mode, SeededRng* rng) {
        if (mode == nn::Mode::infer || cfg_.dropout == 0.0) return x;
        if (!rng) throw std::invalid_argument("dropout in training mode needs an rng");
        return nn::dropout(x, static_cast<T>(cfg_.dropout), mode, *rng);
    }

    template <typename PF, typename BF>
    void for_each_named(PF pf, BF bf) {
        for (std::size_t s = 0; s < enc_.size(); ++s) {
            const std::string p = "enc." + std::to_string(s);
            pf(p + ".conv.w", enc_[s].conv.w);
            pf(p + ".conv.b", enc_[s].conv.b);
            pf(p + ".bn.gamma", enc_[s].bn.gamma);
            pf(p + ".bn.beta", enc_[s].bn.beta);
            bf(p + ".bn.running_mean", &enc_[s].bn.stats.running_mean);
            bf(p + ".bn.running_var", &enc_[s].bn.stats.running_var);
        }
        pf("head.fc1.w", head1_.w);
        pf("head.fc1.b", head1_.b);
        pf("head.bn1.gamma", head_bn1_.gamma);
        pf("head.bn1.beta", head_bn1_.beta);
        bf("head.bn1.running_mean", &head_bn1_.stats.running_mean);
        bf("head.bn1.running_var", &head_bn1_.stats.running_var);
        pf("head.fc2.w", head2_.w);
        pf("head.fc2.b", head2_.b);
        pf("head.bn2.gamma", head_bn2_.gamma);
        pf("head.bn2.beta", head_bn2_.beta);
        bf("head.bn2.running_mean", &head_bn2_.stats.running_mean);
        bf("head.bn2.running_var", &head_bn2_.stats.running_var);
        pf("head.out.w", head_out_.w);
        pf("head.out.b", head_out_.b);
    }

    ClsConfig cfg_;
    std::vector<ConvBn> enc_;
    LinearP head1_, head2_;
    Bn head_bn1_, head_bn2_;
    LinearP head_out_;
};

}  // namespace derma
