#pragma once

// Lesion segmentation network: a stride-2 convolutional backbone feeding a
// dilated-pyramid bottleneck, attention-gated skip connections, a
// transpose-conv decoder with depthwise-separable double-conv blocks, two
// auxiliary supervision heads, and a final 1x1 output.

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

struct SegConfig {
    int input_side = 224;
    int in_channels = 3;
    // One stride-2 stage per entry; the last entry is the bottleneck depth.
    std::vector<int> backbone_channels{40, 80, 160, 320, 640};
    // One decoder stage per backbone stage, shallow to full resolution.
    std::vector<int> decoder_channels{320, 160, 80, 40, 24};
    std::vector<int> aspp_rates{1, 2, 3};
    int aspp_branch_channels = 64;
    int aspp_out_channels = 128;
    int dag_hidden_channels = 16;
    int aux_heads = 2;  // fixed by the architecture

    int stages() const { return static_cast<int>(backbone_channels.size()); }
    int bottleneck_side() const { return input_side >> stages(); }
    int max_rate() const {
        int m = 1;
        for (int r : aspp_rates) m = std::max(m, r);
        return m;
    }

    void validate() const {
        if (input_side < 32 || input_side % 32 != 0)
            throw std::invalid_argument("SegConfig: input side must be a positive multiple of 32");
        if (in_channels < 1) throw std::invalid_argument("SegConfig: bad channel count");
        if (backbone_channels.empty() || backbone_channels.size() > 5)
            throw std::invalid_argument("SegConfig: stage count must be 1..5");
        if (decoder_channels.size() != backbone_channels.size())
            throw std::invalid_argument("SegConfig: decoder stage count must equal backbone stage count");
        for (int c : backbone_channels)
            if (c < 1) throw std::invalid_argument("SegConfig: bad backbone channels");
        for (int c : decoder_channels)
            if (c < 1) throw std::invalid_argument("SegConfig: bad decoder channels");
        if (aspp_rates.empty()) throw std::invalid_argument("SegConfig: need at least one dilation rate");
        for (std::size_t i = 0; i < aspp_rates.size(); ++i) {
            if (aspp_rates[i] < 1) throw std::invalid_argument("SegConfig: dilation rates must be >= 1");
            for (std::size_t j = i + 1; j < aspp_rates.size(); ++j)
                if (aspp_rates[i] == aspp_rates[j])
                    throw std::invalid_argument("SegConfig: dilation rates must be distinct");
        }
        if (aspp_branch_channels < 1 || aspp_out_channels < 1 || dag_hidden_channels < 1)
            throw std::invalid_argument("SegConfig: bad bottleneck channels");
        if (aux_heads != 2) throw std::invalid_argument("SegConfig: exactly two auxiliary heads");
        if (static_cast<int>(backbone_channels.size()) < aux_heads)
            throw std::invalid_argument("SegConfig: need at least as many decoder stages as aux heads");
    }

    /// 64-pixel three-stage configuration sized for CPU training.
    static SegConfig desk() {
        SegConfig c;
        c.input_side = 64;
        c.backbone_channels = {16, 32, 64};
        c.decoder_channels = {32, 16, 8};
        c.aspp_branch_channels = 32;
        c.aspp_out_channels = 64;
        c.dag_hidden_channels = 8;
        return c;
    }

    /// Smallest config exercising every block; used for gradient checks.
    static SegConfig tiny() {
        SegConfig c;
        c.input_side = 32;
        c.backbone_channels = {4, 8};
        c.decoder_channels = {6, 4};
        c.aspp_branch_channels = 4;
        c.aspp_out_channels = 8;
        c.dag_hidden_channels = 4;
        return c;
    }
};

template <typename T>
struct SegOutput {
    Var<T> final_logits;  // (B,1,S,S)
    Var<T> aux1_logits;   // (B,1,S,S), training mode only
    Var<T> aux2_logits;   // (B,1,S,S), training mode only
};

template <typename T>
class DeepUnet {
public:
    DeepUnet(SegConfig cfg, SeededRng& rng) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const int S = cfg_.stages();

        int c_prev = cfg_.in_channels;
        for (int s = 0; s < S; ++s) {
            backbone_.push_back(make_conv_bn({cfg_.backbone_channels[s], c_prev, 3, 3}, rng));
            c_prev = cfg_.backbone_channels[s];
        }

        const int bott_in = cfg_.backbone_channels.back();
        for (std::size_t r = 0; r < cfg_.aspp_rates.size(); ++r)
            aspp_branches_.push_back(make_conv({cfg_.aspp_branch_channels, bott_in, 3, 3}, rng));
        aspp_branches_.push_back(make_conv({cfg_.aspp_branch_channels, bott_in, 1, 1}, rng));
        const int concat_ch = cfg_.aspp_branch_channels * static_cast<int>(aspp_branches_.size());
        aspp_fuse_ = make_conv_bn({cfg_.aspp_out_channels, concat_ch, 1, 1}, rng);

        int dec_in = cfg_.aspp_out_channels;
        for (int s = 0; s < S; ++s) {
            DecoderStage st;
            const int dec_out = cfg_.decoder_channels[s];
            st.tconv = {Var<T>::leaf(nn::kaiming_uniform<T>({dec_in, dec_out, 2, 2},
                                                            static_cast<std::int64_t>(dec_in) * 4, rng),
                                     true),
                        Var<T>::leaf(Tensor<T>({dec_out}), true)};
            const int skip_idx = S - 2 - s;
            int merged_ch = dec_out;
            if (skip_idx >= 0) {
                const int enc_ch = cfg_.backbone_channels[skip_idx];
                Dag dag;
                dag.att1 = make_conv_bn({cfg_.dag_hidden_channels, enc_ch + dec_out, 1, 1}, rng);
                dag.att2 = {Var<T>::leaf(nn::xavier_uniform<T>({1, cfg_.dag_hidden_channels, 1, 1},
                                                               cfg_.dag_hidden_channels, 1, rng),
                                         true),
                            Var<T>::leaf(Tensor<T>({1}), true)};
                dag.dsc.dw = Var<T>::leaf(nn::kaiming_uniform<T>({enc_ch, 1, 3, 3}, 9, rng), true);
                dag.dsc.pw = make_conv({enc_ch, enc_ch, 1, 1}, rng);
                dags_.push_back(std::move(dag));
                merged_ch += enc_ch;
            }
            st.conv1 = make_dsc_bn(merged_ch, dec_out, rng);
            st.conv2 = make_dsc_bn(dec_out, dec_out, rng);
            decoder_.push_back(std::move(st));
            dec_in = dec_out;
        }

        for (int a = 0; a < cfg_.aux_heads; ++a) {
            const int ch = cfg_.decoder_channels[a];
            aux_.push_back({Var<T>::leaf(nn::xavier_uniform<T>({1, ch, 1, 1}, ch, 1, rng), true),
                            Var<T>::leaf(Tensor<T>({1}), true)});
        }
        const int last_ch = cfg_.decoder_channels.back();
        final_ = {Var<T>::leaf(nn::xavier_uniform<T>({1, last_ch, 1, 1}, last_ch, 1, rng), true),
                  Var<T>::leaf(Tensor<T>({1}), true)};
    }

    const SegConfig& config() const { return cfg_; }

    /// Stride-2 stages; element i has spatial side input_side / 2^(i+1).
    std::vector<Var<T>> backbone_forward(const Var<T>& x, nn::Mode mode,
                                         nn::PadMode pad = nn::PadMode::zero) {
        const auto& s = x.value().shape();
        if (x.value().rank() != 4 || s[1] != cfg_.in_channels)
            throw std::invalid_argument("backbone_forward: input must be (B," +
                                        std::to_string(cfg_.in_channels) + ",S,S)");
        if (s[2] != s[3] || s[2] % 32 != 0)
            throw std::invalid_argument("backbone_forward: input side must be square and divisible by 32");
        std::vector<Var<T>> pyramid;
        Var<T> cur = x;
        for (auto& stage : backbone_) {
            cur = relu(bn_apply(nn::conv2d(cur, stage.conv.w, stage.conv.b, 2, 1, 1, pad), stage.bn,
                                mode));
            pyramid.push_back(cur);
        }
        return pyramid;
    }

    /// Parallel dilated 3x3 branches plus a 1x1 branch, concatenated and fused
    /// by a 1x1 conv + BN + ReLU. Rejects inputs smaller than the widest
    /// dilated kernel's span.
    Var<T> aspp_forward(const Var<T>& x, nn::Mode mode, nn::PadMode pad = nn::PadMode::zero) {
        const int side = x.value().shape()[2];
        const int span = 2 * cfg_.max_rate() + 1;
        if (side < span)
            throw std::invalid_argument(
                "aspp_forward: bottleneck side " + std::to_string(side) +
                " is smaller than the dilation-" + std::to_string(cfg_.max_rate()) +
                " kernel span " + std::to_string(span) +
                "; use fewer backbone stages or a larger input");
        std::vector<Var<T>> branches;
        for (std::size_t i = 0; i < cfg_.aspp_rates.size(); ++i) {
            const int r = cfg_.aspp_rates[i];
            branches.push_back(nn::conv2d(x, aspp_branches_[i].w, aspp_branches_[i].b, 1, r, r, pad));
        }
        branches.push_back(
            nn::conv2d(x, aspp_branches_.back().w, aspp_branches_.back().b, 1, 0, 1, pad));
        auto fused = nn::conv2d(concat<T>(branches, 1), aspp_fuse_.conv.w, aspp_fuse_.conv.b);
        return relu(bn_apply(fused, aspp_fuse_.bn, mode));
    }

    /// Attention-gated skip: mask = sigmoid(1x1 -> BN -> ReLU -> 1x1 over
    /// [encoder || decoder]); output = DSC(encoder) * mask. `bypass` replaces
    /// the mask with ones and must leave everything else identical.
    Var<T> dag_forward(const Var<T>& encoder_feat, const Var<T>& decoder_feat, int dag_index,
                       nn::Mode mode, nn::PadMode pad = nn::PadMode::zero, bool bypass = false) {
        if (encoder_feat.value().shape()[2] != decoder_feat.value().shape()[2] ||
            encoder_feat.value().shape()[3] != decoder_feat.value().shape()[3])
            throw std::invalid_argument("dag_forward: encoder/decoder spatial mismatch");
        auto& dag = dags_.at(dag_index);
        auto transformed = nn::depthwise_separable_conv(encoder_feat, dag.dsc.dw, dag.dsc.pw.w,
                                                        dag.dsc.pw.b, 1, 1, 1, pad);
        if (bypass) return transformed;
        return nn::mul_bcast_channel(transformed,
                                     attention_mask(encoder_feat, decoder_feat, dag_index, mode));
    }

    /// The one-channel sigmoid gate the skip path multiplies by.
    Var<T> attention_mask(const Var<T>& encoder_feat, const Var<T>& decoder_feat, int dag_index,
                          nn::Mode mode) {
        auto& dag = dags_.at(dag_index);
        auto joint = concat<T>({encoder_feat, decoder_feat}, 1);
        auto hidden = relu(bn_apply(nn::conv2d(joint, dag.att1.conv.w, dag.att1.conv.b), dag.att1.bn,
                                    mode));
        return sigmoid(nn::conv2d(hidden, dag.att2.w, dag.att2.b));
    }

    /// Transpose-conv upsample, optional gated-skip concat, then two
    /// DSC-BN-ReLU blocks.
    Var<T> decoder_stage(const Var<T>& dec_in, const Var<T>& gated_skip, int stage_index,
                         nn::Mode mode, nn::PadMode pad = nn::PadMode::zero) {
        auto& st = decoder_.at(stage_index);
        auto up = nn::transpose_conv2d(dec_in, st.tconv.w, st.tconv.b, 2);
        Var<T> merged = up;
        if (gated_skip.defined()) {
            if (gated_skip.value().shape()[2] != up.value().shape()[2] ||
                gated_skip.value().shape()[3] != up.value().shape()[3])
                throw std::invalid_argument("decoder_stage: skip extent mismatch after upsample");
            merged = concat<T>({up, gated_skip}, 1);
        }
        auto h = relu(bn_apply(nn::depthwise_separable_conv(merged, st.conv1.conv.dw,
                                                            st.conv1.conv.pw.w, st.conv1.conv.pw.b,
                                                            1, 1, 1, pad),
                               st.conv1.bn, mode));
        return relu(bn_apply(nn::depthwise_separable_conv(h, st.conv2.conv.dw, st.conv2.conv.pw.w,
                                                          st.conv2.conv.pw.b, 1, 1, 1, pad),
                             st.conv2.bn, mode));
    }

    /// Full forward pass. Training mode also produces the two auxiliary
    /// full-resolution logit maps; inference mode leaves them undefined.
    SegOutput<T> forward(const Var<T>& x, nn::Mode mode, nn::PadMode pad = nn::PadMode::zero,
                         bool bypass_dag = false) {
        auto pyramid = backbone_forward(x, mode, pad);
        auto dec = aspp_forward(pyramid.back(), mode, pad);
        const int S = cfg_.stages();
        const int side = x.value().shape()[2];
        SegOutput<T> out;
        for (int s = 0; s < S; ++s) {
            const int skip_idx = S - 2 - s;
            Var<T> gated;
            if (skip_idx >= 0) {
                auto up_probe = nn::transpose_conv2d(dec, decoder_[s].tconv.w, decoder_[s].tconv.b, 2);
                gated = dag_forward(pyramid[skip_idx], up_probe, s, mode, pad, bypass_dag);
                // Reuse the already-computed upsample for the merge.
                Var<T> merged = concat<T>({up_probe, gated}, 1);
                auto h = relu(bn_apply(
                    nn::depthwise_separable_conv(merged, decoder_[s].conv1.conv.dw,
                                                 decoder_[s].conv1.conv.pw.w,
                                                 decoder_[s].conv1.conv.pw.b, 1, 1, 1, pad),
                    decoder_[s].conv1.bn, mode));
                dec = relu(bn_apply(
                    nn::depthwise_separable_conv(h, decoder_[s].conv2.conv.dw,
                                                 decoder_[s].conv2.conv.pw.w,
                                                 decoder_[s].conv2.conv.pw.b, 1, 1, 1, pad),
                    decoder_[s].conv2.bn, mode));
            } else {
                dec = decoder_stage(dec, Var<T>(), s, mode, pad);
            }
            if (mode == nn::Mode::train && s < cfg_.aux_heads) {
                auto head = nn::conv2d(dec, aux_[s].w, aux_[s].b);
                auto up_logits = nn::bilinear_upsample(head, side, side);
                (s == 0 ? out.aux1_logits : out.aux2_logits) = up_logits;
            }
        }
        out.final_logits = nn::conv2d(dec, final_.w, final_.b);
        if (!out.final_logits.value().all_finite())
            throw std::runtime_error("deep_unet_forward: non-finite logits");
        return out;
    }

    SegOutput<T> forward(const Tensor<T>& x, nn::Mode mode, nn::PadMode pad = nn::PadMode::zero,
                         bool bypass_dag = false) {
        return forward(Var<T>::leaf(x), mode, pad, bypass_dag);
    }

    /// Saturates the second attention conv's bias so every mask pixel ~= 1.
    void saturate_attention_bias(T value = T(50)) {
        for (auto& dag : dags_) dag.att2.b.value_mut().fill(value);
    }

    NamedParams<T> params() {
        NamedParams<T> out;
        for_each_named([&out](const std::string& name, Var<T> v) { out.emplace_back(name, v); },
                       [](const std::string&, Tensor<T>*) {});
        return out;
    }

    NamedBuffers<T> buffers() {
        NamedBuffers<T> out;
        for_each_named([](const std::string&, Var<T>) {},
                       [&out](const std::string& name, Tensor<T>* t) { out.emplace_back(name, t); });
        return out;
    }

private:
    struct Conv {
        Var<T> w, b;
    };
    struct Bn {
        Var<T> gamma, beta;
        nn::BnStats<T> stats;
        explicit Bn(int ch)
            : gamma(Var<T>::leaf(Tensor<T>::full({ch}, T(1)), true)),
              beta(Var<T>::leaf(Tensor<T>({ch}), true)),
              stats(ch) {}
    };
    struct ConvBn {
        Conv conv;
        Bn bn;
    };
    struct Dsc {
        Var<T> dw;
        Conv pw;
    };
    struct DscBn {
        Dsc conv;
        Bn bn;
    };
    struct Dag {
        ConvBn att1;
        Conv att2;
        Dsc dsc;
        Dag() : att1{Conv{}, Bn(1)} {}
    };
    struct DecoderStage {
        Conv tconv;
        DscBn conv1;
        DscBn conv2;
        DecoderStage() : conv1{Dsc{}, Bn(1)}, conv2{Dsc{}, Bn(1)} {}
    };

    Conv make_conv(const std::vector<int>& wshape, SeededRng& rng) {
        const std::int64_t fan_in =
            static_cast<std::int64_t>(wshape[1]) * wshape[2] * wshape[3];
        return {Var<T>::leaf(nn::kaiming_uniform<T>(wshape, fan_in, rng), true),
                Var<T>::leaf(Tensor<T>({wshape[0]}), true)};
    }
    ConvBn make_conv_bn(const std::vector<int>& wshape, SeededRng& rng) {
        return {make_conv(wshape, rng), Bn(wshape[0])};
    }
    DscBn make_dsc_bn(int in_ch, int out_ch, SeededRng& rng) {
        DscBn d{Dsc{}, Bn(out_ch)};
        d.conv.dw = Var<T>::leaf(nn::kaiming_uniform<T>({in_ch, 1, 3, 3}, 9, rng), true);
        d.conv.pw = make_conv({out_ch, in_ch, 1, 1}, rng);
        return d;
    }
    Var<T> bn_apply(const Var<T>& x, Bn& bn, nn::Mode mode) {
        return nn::batch_norm(x, bn.gamma, bn.beta, bn.stats, mode);
    }

    template <typename PF, typename BF>
    void visit_bn(const std::string& prefix, Bn& bn, PF&& pf, BF&& bf) {
        pf(prefix + ".gamma", bn.gamma);
        pf(prefix + ".beta", bn.beta);
        bf(prefix + ".running_mean", &bn.stats.running_mean);
        bf(prefix + ".running_var", &bn.stats.running_var);
    }
    template <typename PF, typename BF>
    void visit_dsc_bn(const std::string& prefix, DscBn& d, PF&& pf, BF&& bf) {
        pf(prefix + ".dw", d.conv.dw);
        pf(prefix + ".pw.w", d.conv.pw.w);
        pf(prefix + ".pw.b", d.conv.pw.b);
        visit_bn(prefix + ".bn", d.bn, pf, bf);
    }

    template <typename PF, typename BF>
    void for_each_named(PF pf, BF bf) {
        for (std::size_t s = 0; s < backbone_.size(); ++s) {
            const std::string p = "backbone." + std::to_string(s);
            pf(p + ".conv.w", backbone_[s].conv.w);
            pf(p + ".conv.b", backbone_[s].conv.b);
            visit_bn(p + ".bn", backbone_[s].bn, pf, bf);
        }
        for (std::size_t i = 0; i < aspp_branches_.size(); ++i) {
            const std::string p = "aspp.branch." + std::to_string(i);
            pf(p + ".w", aspp_branches_[i].w);
            pf(p + ".b", aspp_branches_[i].b);
        }
        pf("aspp.fuse.w", aspp_fuse_.conv.w);
        pf("aspp.fuse.b", aspp_fuse_.conv.b);
        visit_bn("aspp.fuse.bn", aspp_fuse_.bn, pf, bf);
        for (std::size_t d = 0; d < dags_.size(); ++d) {
            const std::string p = "dag." + std::to_string(d);
            pf(p + ".att1.w", dags_[d].att1.conv.w);
            pf(p + ".att1.b", dags_[d].att1.conv.b);
            visit_bn(p + ".att1.bn", dags_[d].att1.bn, pf, bf);
            pf(p + ".att2.w", dags_[d].att2.w);
            pf(p + ".att2.b", dags_[d].att2.b);
            pf(p + ".dsc.dw", dags_[d].dsc.dw);
            pf(p + ".dsc.pw.w", dags_[d].dsc.pw.w);
            pf(p + ".dsc.pw.b", dags_[d].dsc.pw.b);
        }
        for (std::size_t s = 0; s < decoder_.size(); ++s) {
            const std::string p = "decoder." + std::to_string(s);
            pf(p + ".tconv.w", decoder_[s].tconv.w);
            pf(p + ".tconv.b", decoder_[s].tconv.b);
            visit_dsc_bn(p + ".conv1", decoder_[s].conv1, pf, bf);
            visit_dsc_bn(p + ".conv2", decoder_[s].conv2, pf, bf);
        }
        for (std::size_t a = 0; a < aux_.size(); ++a) {
            const std::string p = "aux." + std::to_string(a);
            pf(p + ".w", aux_[a].w);
            pf(p + ".b", aux_[a].b);
        }
        pf("final.w", final_.w);
        pf("final.b", final_.b);
    }

    SegConfig cfg_;
    std::vector<ConvBn> backbone_;
    std::vector<Conv> aspp_branches_;  // dilated branches then the 1x1 branch
    ConvBn aspp_fuse_{Conv{}, Bn(1)};
    std::vector<Dag> dags_;            // one per decoder stage that has a skip
    std::vector<DecoderStage> decoder_;
    std::vector<Conv> aux_;
    Conv final_;
};

}  // namespace derma
