#include <cmath>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "derma/autodiff.hpp"
#include "derma/clsnet.hpp"
#include "derma/gradcheck.hpp"
#include "derma/losses.hpp"
#include "derma/nn.hpp"
#include "derma/params.hpp"
#include "derma/rng.hpp"
#include "derma/tensor.hpp"

using namespace derma;
using nn::Mode;

namespace {

MhcaParams<double> identity_mhca(int c) {
    Tensor<double> eye({c, c});
    for (int i = 0; i < c; ++i) eye.at(i, i) = 1.0;
    auto leaf = [](Tensor<double> t) { return Var<double>::leaf(std::move(t)); };
    return {leaf(eye), leaf(Tensor<double>({c})), leaf(eye), leaf(Tensor<double>({c})),
            leaf(eye), leaf(Tensor<double>({c})), leaf(eye), leaf(Tensor<double>({c}))};
}

MetadataBatch<double> meta_batch(int b, int dim, double alpha_value, SeededRng& rng) {
    MetadataBatch<double> m;
    m.features = random_uniform<double>({b, dim}, 0.0, 1.0, rng);
    m.alpha = Tensor<double>::full({b}, alpha_value);
    return m;
}

}  // namespace

TEST(ClsConfig, DeskAndTinyValidate) {
    EXPECT_NO_THROW(ClsConfig::desk().validate());
    EXPECT_NO_THROW(ClsConfig::tiny().validate());
}

TEST(ClsConfig, RejectsGeometryMismatch) {
    auto c = ClsConfig::desk();
    c.input_side = 96;  // 96 / 2^4 = 6 != grid 4
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ClsConfig, RejectsHeadDivisibility) {
    auto c = ClsConfig::desk();
    c.heads = 5;  // 128 % 5 != 0
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ClsConfig, RejectsEncoderChannelMismatch) {
    auto c = ClsConfig::desk();
    c.encoder_channels.back() = 64;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Tokens, DeskShape) {
    SeededRng rng(1);
    TdbnClassifier<float> net(ClsConfig::desk(), rng);
    auto x = Var<float>::leaf(random_normal<float>({2, 3, 64, 64}, 0.0f, 1.0f, rng));
    auto tok = net.encode_tokens(x, 0, Mode::infer);
    EXPECT_EQ(tok.value().shape(), (std::vector<int>{2, 16, 128}));
}

TEST(Tokens, FlattenIsRowMajor) {
    SeededRng rng(2);
    TdbnClassifier<double> net(ClsConfig::tiny(), rng);
    Tensor<double> map({1, 2, 2, 2});
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 2; ++x) map.at(0, c, y, x) = 100.0 * c + 10.0 * y + x;
    auto tok = net.tokens_from_map(Var<double>::leaf(map));
    ASSERT_EQ(tok.value().shape(), (std::vector<int>{1, 4, 2}));
    // Token t = y*2 + x carries channel values at that spatial position.
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) {
            const int t = y * 2 + x;
            EXPECT_DOUBLE_EQ(tok.value().at(0, t, 0), 10.0 * y + x);
            EXPECT_DOUBLE_EQ(tok.value().at(0, t, 1), 100.0 + 10.0 * y + x);
        }
}

TEST(Tokens, StreamsUseIndependentEncoders) {
    SeededRng rng(3);
    TdbnClassifier<double> net(ClsConfig::tiny(), rng);
    auto x = Var<double>::leaf(random_normal<double>({2, 3, 16, 16}, 0.0, 1.0, rng));
    auto a = net.encode_feature_map(x, 0, Mode::infer);
    auto b = net.encode_feature_map(x, 1, Mode::infer);
    ASSERT_EQ(a.value().shape(), b.value().shape());
    double diff = 0.0;
    for (std::int64_t i = 0; i < a.value().size(); ++i)
        diff = std::max(diff, std::abs(a.value()[i] - b.value()[i]));
    EXPECT_GT(diff, 1e-3);
}

TEST(Mhca, TwoTokenOracle) {
    // Identity projections, q1 = [1,0], k1 = [1,0], k2 = [0,1], v = basis rows.
    // Per-head scale 1/sqrt(2) gives logits [1/sqrt(2), 0]; the first output
    // row is [w, 1-w] with w = e^{1/sqrt 2} / (1 + e^{1/sqrt 2}).
    Tensor<double> q({1, 2, 2});
    q.at(0, 0, 0) = 1.0;
    q.at(0, 1, 1) = 1.0;
    Tensor<double> kv = q;
    auto p = identity_mhca(2);
    Var<double> attn;
    auto out = mhca(Var<double>::leaf(q), Var<double>::leaf(kv), Var<double>::leaf(kv), p, 1,
                    &attn);
    const double w = std::exp(1.0 / std::sqrt(2.0)) / (1.0 + std::exp(1.0 / std::sqrt(2.0)));
    EXPECT_NEAR(out.value().at(0, 0, 0), 0.6698, 5e-4);
    EXPECT_NEAR(out.value().at(0, 0, 1), 0.3302, 5e-4);
    EXPECT_NEAR(out.value().at(0, 0, 0), w, 1e-9);
    EXPECT_NEAR(attn.value().at(0, 0, 0, 0), w, 1e-9);
    EXPECT_NEAR(attn.value().at(0, 0, 0, 1), 1.0 - w, 1e-9);
}

TEST(Mhca, SingleTokenWeightIsOne) {
    Tensor<double> q({1, 1, 2});
    q.at(0, 0, 0) = 0.3;
    q.at(0, 0, 1) = -0.7;
    Tensor<double> v({1, 1, 2});
    v.at(0, 0, 0) = 5.0;
    v.at(0, 0, 1) = -2.0;
    auto p = identity_mhca(2);
    Var<double> attn;
    auto out = mhca(Var<double>::leaf(q), Var<double>::leaf(q), Var<double>::leaf(v), p, 1,
                    &attn);
    EXPECT_DOUBLE_EQ(attn.value().at(0, 0, 0, 0), 1.0);
    EXPECT_NEAR(out.value().at(0, 0, 0), 5.0, 1e-12);
    EXPECT_NEAR(out.value().at(0, 0, 1), -2.0, 1e-12);
}

TEST(Mhca, IdenticalKeysGiveUniformAttention) {
    SeededRng rng(4);
    const int T = 4, C = 2;
    auto q = random_normal<double>({1, T, C}, 0.0, 1.0, rng);
    Tensor<double> k({1, T, C});
    for (int t = 0; t < T; ++t) {
        k.at(0, t, 0) = 0.5;
        k.at(0, t, 1) = -1.25;
    }
    auto v = random_normal<double>({1, T, C}, 0.0, 1.0, rng);
    auto p = identity_mhca(C);
    auto out = mhca(Var<double>::leaf(q), Var<double>::leaf(k), Var<double>::leaf(v), p, 1);
    for (int c = 0; c < C; ++c) {
        double mean = 0.0;
        for (int t = 0; t < T; ++t) mean += v.at(0, t, c);
        mean /= T;
        for (int t = 0; t < T; ++t) EXPECT_NEAR(out.value().at(0, t, c), mean, 1e-12);
    }
}

TEST(Mhca, AttentionRowsSumToOne) {
    SeededRng rng(5);
    const int B = 2, T = 4, C = 8, H = 2;
    auto mk = [&]() {
        return Var<double>::leaf(random_normal<double>({B, T, C}, 0.0, 1.0, rng));
    };
    MhcaParams<double> p{
        Var<double>::leaf(nn::xavier_uniform<double>({C, C}, C, C, rng)),
        Var<double>::leaf(Tensor<double>({C})),
        Var<double>::leaf(nn::xavier_uniform<double>({C, C}, C, C, rng)),
        Var<double>::leaf(Tensor<double>({C})),
        Var<double>::leaf(nn::xavier_uniform<double>({C, C}, C, C, rng)),
        Var<double>::leaf(Tensor<double>({C})),
        Var<double>::leaf(nn::xavier_uniform<double>({C, C}, C, C, rng)),
        Var<double>::leaf(Tensor<double>({C}))};
    Var<double> attn;
    mhca(mk(), mk(), mk(), p, H, &attn);
    ASSERT_EQ(attn.value().shape(), (std::vector<int>{B, H, T, T}));
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < H; ++h)
            for (int i = 0; i < T; ++i) {
                double s = 0.0;
                for (int j = 0; j < T; ++j) s += attn.value().at(b, h, i, j);
                EXPECT_NEAR(s, 1.0, 1e-9);
            }
}

TEST(Mhca, JointKeyValuePermutationInvariance) {
    // Re-ordering key/value token pairs together cannot change the output.
    SeededRng rng(6);
    const int T = 4, C = 8, H = 2;
    auto q = random_normal<double>({1, T, C}, 0.0, 1.0, rng);
    auto k = random_normal<double>({1, T, C}, 0.0, 1.0, rng);
    auto v = random_normal<double>({1, T, C}, 0.0, 1.0, rng);
    MhcaParams<double> p{
        Var<double>::leaf(nn::xavier_uniform<double>({C, C}, C, C, rng)),
        Var<double>::leaf(Tensor<double>({C})),
        Var<double>::leaf(nn::xavier_uniform<double>({C, C}, C, C, rng)),
        Var<double>::leaf(Tensor<double>({C})),
        Var<double>::leaf(nn::xavier_uniform<double>({C, C}, C, C, rng)),
        Var<double>::leaf(Tensor<double>({C})),
        Var<double>::leaf(nn::xavier_uniform<double>({C, C}, C, C, rng)),
        Var<double>::leaf(Tensor<double>({C}))};
    const int perm[4] = {2, 0, 3, 1};
    Tensor<double> kp({1, T, C}), vp({1, T, C});
    for (int t = 0; t < T; ++t)
        for (int c = 0; c < C; ++c) {
            kp.at(0, t, c) = k.at(0, perm[t], c);
            vp.at(0, t, c) = v.at(0, perm[t], c);
        }
    auto a = mhca(Var<double>::leaf(q), Var<double>::leaf(k), Var<double>::leaf(v), p, H);
    auto b = mhca(Var<double>::leaf(q), Var<double>::leaf(kp), Var<double>::leaf(vp), p, H);
    for (std::int64_t i = 0; i < a.value().size(); ++i)
        EXPECT_NEAR(a.value()[i], b.value()[i], 1e-9);
}

TEST(Mhca, SoftmaxShiftInvariance) {
    Tensor<double> z({1, 3});
    z[0] = 1.0;
    z[1] = 2.0;
    z[2] = 3.0;
    Tensor<double> zs({1, 3});
    for (int i = 0; i < 3; ++i) zs[i] = z[i] + 100.0;
    auto a = softmax(Var<double>::leaf(z), 1);
    auto b = softmax(Var<double>::leaf(zs), 1);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(a.value()[i], b.value()[i], 1e-12);
}

TEST(Mhca, RejectsBadInputs) {
    auto p = identity_mhca(2);
    Tensor<double> flat({2, 2});
    EXPECT_THROW(mhca(Var<double>::leaf(flat), Var<double>::leaf(flat), Var<double>::leaf(flat),
                      p, 1),
                 std::invalid_argument);
    Tensor<double> q({1, 2, 2}), k({1, 3, 2});
    EXPECT_THROW(
        mhca(Var<double>::leaf(q), Var<double>::leaf(k), Var<double>::leaf(k), p, 1),
        std::invalid_argument);
    Tensor<double> odd({1, 2, 3});
    EXPECT_THROW(mhca(Var<double>::leaf(odd), Var<double>::leaf(odd), Var<double>::leaf(odd), p,
                      2),
                 std::invalid_argument);
}

TEST(CrossFusion, FfnZeroReducesToStackedLayerNorms) {
    SeededRng rng(7);
    TdbnClassifier<double> net(ClsConfig::tiny(), rng);
    auto params = net.params();
    auto w2 = find_param(params, "ffn.w2");
    auto b2 = find_param(params, "ffn.b2");
    w2.value_mut() = Tensor<double>(w2.value().shape());
    b2.value_mut() = Tensor<double>(b2.value().shape());

    const int T = net.config().tokens(), C = net.config().channels;
    auto q = Var<double>::leaf(random_normal<double>({2, T, C}, 0.0, 1.0, rng));
    auto k = Var<double>::leaf(random_normal<double>({2, T, C}, 0.0, 1.0, rng));
    auto got = net.cross_fusion_block(q, k, q, Mode::infer, nullptr);

    auto z = nn::layer_norm(add(q, mhca(q, k, q, net.attention_params(), net.config().heads)),
                            find_param(params, "ln1.gamma"), find_param(params, "ln1.beta"));
    auto zhat = nn::layer_norm(z, find_param(params, "ln2.gamma"), find_param(params, "ln2.beta"));
    auto lin = nn::linear(nn::global_avg_pool(zhat), find_param(params, "vis_proj.w"),
                          find_param(params, "vis_proj.b"));
    // Fresh inference BN scales by 1/sqrt(1 + eps).
    auto expect = relu(scale(lin, 1.0 / std::sqrt(1.0 + 1e-5)));
    ASSERT_EQ(got.value().shape(), expect.value().shape());
    for (std::int64_t i = 0; i < got.value().size(); ++i)
        EXPECT_NEAR(got.value()[i], expect.value()[i], 1e-9);
}

TEST(Fuse, AdditiveWithMask) {
    Tensor<double> fv({2, 2}), ft({2, 2});
    fv.at(0, 0) = 1.0;
    fv.at(0, 1) = 2.0;
    fv.at(1, 0) = -1.0;
    fv.at(1, 1) = 0.5;
    ft.at(0, 0) = 3.0;
    ft.at(0, 1) = 4.0;
    ft.at(1, 0) = 10.0;
    ft.at(1, 1) = 10.0;
    Tensor<double> alpha({2});
    alpha[0] = 1.0;
    alpha[1] = 0.0;
    auto f = fuse(Var<double>::leaf(fv), Var<double>::leaf(ft), Var<double>::leaf(alpha));
    EXPECT_DOUBLE_EQ(f.value().at(0, 0), 4.0);
    EXPECT_DOUBLE_EQ(f.value().at(0, 1), 6.0);
    EXPECT_DOUBLE_EQ(f.value().at(1, 0), -1.0);
    EXPECT_DOUBLE_EQ(f.value().at(1, 1), 0.5);
}

TEST(Tabular, MissingMetadataRowIsExactlyZero) {
    SeededRng rng(8);
    TdbnClassifier<double> net(ClsConfig::tiny(), rng);
    const auto& cfg = net.config();
    auto features = random_uniform<double>({2, cfg.tabular_dim}, 0.0, 1.0, rng);
    Tensor<double> alpha({2});
    alpha[0] = 1.0;
    alpha[1] = 0.0;
    auto emb = net.gated_tabular(Var<double>::leaf(features), Var<double>::leaf(alpha),
                                 Mode::train);
    ASSERT_EQ(emb.value().shape(), (std::vector<int>{2, cfg.tabular_hidden[1]}));
    double present = 0.0;
    for (int c = 0; c < cfg.tabular_hidden[1]; ++c) {
        present = std::max(present, std::abs(emb.value().at(0, c)));
        EXPECT_EQ(emb.value().at(1, c), 0.0);
    }
    EXPECT_GT(present, 0.0);
    auto proj = net.tabular_embedding(Var<double>::leaf(features), Var<double>::leaf(alpha),
                                      Mode::train, nullptr);
    EXPECT_EQ(proj.value().shape(), (std::vector<int>{2, cfg.channels}));
}

TEST(Tabular, AlphaZeroMatchesVisionOnlyAndKillsGradients) {
    SeededRng rng(9);
    const auto cfg = ClsConfig::tiny();
    TdbnClassifier<double> net(cfg, rng);
    auto orig = Var<double>::leaf(random_normal<double>({2, 3, 16, 16}, 0.0, 1.0, rng));
    auto seg = Var<double>::leaf(random_normal<double>({2, 3, 16, 16}, 0.0, 1.0, rng));

    auto mrng = rng.split(1);
    auto meta_a = meta_batch(2, cfg.tabular_dim, 0.0, mrng);
    auto meta_b = meta_batch(2, cfg.tabular_dim, 0.0, mrng);  // different features

    auto la = net.forward_traced(orig, seg, meta_a, Mode::train).logits;
    auto lb = net.forward_traced(orig, seg, meta_b, Mode::train).logits;
    for (std::int64_t i = 0; i < la.value().size(); ++i)
        EXPECT_EQ(la.value()[i], lb.value()[i]);

    auto loss = cross_entropy_loss(la, {0, 2});
    backward(loss);
    bool vision_grad_moves = false;
    for (auto& [name, v] : net.params()) {
        if (name.rfind("tab", 0) == 0) {
            const auto& g = v.grad();
            for (std::int64_t i = 0; i < g.size(); ++i)
                ASSERT_EQ(g[i], 0.0) << name << " leaks gradient through a masked batch";
        } else if (name.rfind("enc_orig", 0) == 0) {
            const auto& g = v.grad();
            for (std::int64_t i = 0; i < g.size(); ++i)
                if (g[i] != 0.0) vision_grad_moves = true;
        }
    }
    EXPECT_TRUE(vision_grad_moves);
}

TEST(Head, ShapesAndRejects) {
    SeededRng rng(10);
    TdbnClassifier<float> net(ClsConfig::desk(), rng);
    auto fused = Var<float>::leaf(random_normal<float>({2, 128}, 0.0f, 1.0f, rng));
    auto logits = net.classifier_head(fused, Mode::infer, nullptr);
    EXPECT_EQ(logits.value().shape(), (std::vector<int>{2, 3}));
    auto bad = Var<float>::leaf(Tensor<float>({2, 64}));
    EXPECT_THROW(net.classifier_head(bad, Mode::infer, nullptr), std::invalid_argument);
}

TEST(Tdbn, ForwardShapesAndTrace) {
    SeededRng rng(11);
    const auto cfg = ClsConfig::tiny();
    TdbnClassifier<double> net(cfg, rng);
    auto mrng = rng.split(2);
    auto meta = meta_batch(2, cfg.tabular_dim, 1.0, mrng);
    auto orig = Var<double>::leaf(random_normal<double>({2, 3, 16, 16}, 0.0, 1.0, rng));
    auto seg = Var<double>::leaf(random_normal<double>({2, 3, 16, 16}, 0.0, 1.0, rng));
    auto trace = net.forward_traced(orig, seg, meta, Mode::train);
    const int g = cfg.grid_side, T = cfg.tokens();
    EXPECT_EQ(trace.logits.value().shape(), (std::vector<int>{2, cfg.num_classes}));
    EXPECT_EQ(trace.orig_feature_map.value().shape(), (std::vector<int>{2, cfg.channels, g, g}));
    EXPECT_EQ(trace.seg_feature_map.value().shape(), (std::vector<int>{2, cfg.channels, g, g}));
    EXPECT_EQ(trace.attention.value().shape(), (std::vector<int>{2, cfg.heads, T, T}));
    for (std::int64_t i = 0; i < trace.logits.value().size(); ++i)
        EXPECT_TRUE(std::isfinite(trace.logits.value()[i]));
}

TEST(Tdbn, RejectsBatchMismatch) {
    SeededRng rng(12);
    const auto cfg = ClsConfig::tiny();
    TdbnClassifier<double> net(cfg, rng);
    auto mrng = rng.split(3);
    auto meta3 = meta_batch(3, cfg.tabular_dim, 1.0, mrng);
    Tensor<double> imgs({2, 3, 16, 16});
    EXPECT_THROW(net.forward(imgs, imgs, meta3, Mode::infer), std::invalid_argument);
    auto bad_dim = meta_batch(2, cfg.tabular_dim + 1, 1.0, mrng);
    EXPECT_THROW(net.forward(imgs, imgs, bad_dim, Mode::infer), std::invalid_argument);
}

TEST(Tdbn, SeededConstructionIsDeterministic) {
    const auto cfg = ClsConfig::tiny();
    SeededRng r1(77), r2(77), r3(78);
    TdbnClassifier<double> a(cfg, r1), b(cfg, r2), c(cfg, r3);
    SeededRng data(5);
    auto orig = random_normal<double>({2, 3, 16, 16}, 0.0, 1.0, data);
    auto seg = random_normal<double>({2, 3, 16, 16}, 0.0, 1.0, data);
    auto meta = meta_batch(2, cfg.tabular_dim, 1.0, data);
    auto la = a.forward(orig, seg, meta, Mode::infer);
    auto lb = b.forward(orig, seg, meta, Mode::infer);
    auto lc = c.forward(orig, seg, meta, Mode::infer);
    double same = 0.0, diff = 0.0;
    for (std::int64_t i = 0; i < la.value().size(); ++i) {
        same = std::max(same, std::abs(la.value()[i] - lb.value()[i]));
        diff = std::max(diff, std::abs(la.value()[i] - lc.value()[i]));
    }
    EXPECT_EQ(same, 0.0);
    EXPECT_GT(diff, 0.0);
}

TEST(Tdbn, DropoutNeedsRngInTraining) {
    SeededRng rng(13);
    auto cfg = ClsConfig::tiny();
    cfg.dropout = 0.3;
    TdbnClassifier<double> net(cfg, rng);
    auto mrng = rng.split(4);
    auto meta = meta_batch(2, cfg.tabular_dim, 1.0, mrng);
    Tensor<double> imgs({2, 3, 16, 16});
    EXPECT_THROW(net.forward(imgs, imgs, meta, Mode::train, nullptr), std::invalid_argument);
    auto drop = rng.split(5);
    EXPECT_NO_THROW(net.forward(imgs, imgs, meta, Mode::train, &drop));
    EXPECT_NO_THROW(net.forward(imgs, imgs, meta, Mode::infer, nullptr));
}

TEST(Tdbn, ProbedFiniteDifferenceAgreement) {
    SeededRng rng(14);
    const auto cfg = ClsConfig::tiny();
    TdbnClassifier<double> net(cfg, rng);
    auto data_rng = rng.split(1);
    auto orig = random_normal<double>({2, 3, 16, 16}, 0.0, 0.5, data_rng);
    auto seg = random_normal<double>({2, 3, 16, 16}, 0.0, 0.5, data_rng);
    auto meta = meta_batch(2, cfg.tabular_dim, 1.0, data_rng);
    const std::vector<int> labels{0, 2};

    auto params = net.params();
    auto graph_loss = [&]() {
        auto logits = net.forward(orig, seg, meta, Mode::train);
        return cross_entropy_loss(logits, labels);
    };
    auto loss = graph_loss();
    backward(loss);

    std::vector<Tensor<double>> values, analytic;
    for (auto& [name, v] : params) {
        values.push_back(v.value());
        analytic.push_back(v.grad());
    }
    auto probe_rng = rng.split(9);
    double err = probe_gradient_rel_error(
        [&](const std::vector<Tensor<double>>& vs) {
            for (std::size_t i = 0; i < vs.size(); ++i) params[i].second.value_mut() = vs[i];
            return graph_loss().value()[0];
        },
        values, analytic, 24, probe_rng);
    EXPECT_LT(err, 1e-4);
}

TEST(Tdbn, ParamRegistryCoversEveryBlock) {
    SeededRng rng(15);
    TdbnClassifier<float> net(ClsConfig::tiny(), rng);
    auto params = net.params();
    for (const char* name :
         {"enc_orig.0.conv.w", "enc_seg.2.bn.gamma", "mhca.wq", "mhca.bo", "ln1.gamma",
          "ffn.w1", "vis_proj.w", "vis_proj.bn.beta", "tab.w1", "tab.bn2.gamma", "tab_proj.w",
          "head.fc1.w", "head.bn2.beta", "head.out.w", "head.out.b"})
        EXPECT_NO_THROW(find_param(params, name)) << name;
    auto buffers = net.buffers();
    bool has_tab_stats = false;
    for (auto& [name, t] : buffers)
        if (name == std::string("tab.bn1.running_mean")) has_tab_stats = true;
    EXPECT_TRUE(has_tab_stats);
}

TEST(SingleBranch, ForwardAndTrace) {
    SeededRng rng(16);
    const auto cfg = ClsConfig::tiny();
    SingleBranchClassifier<double> net(cfg, rng);
    auto x = random_normal<double>({2, 3, 16, 16}, 0.0, 1.0, rng);
    auto t = net.forward_traced(Var<double>::leaf(x), Mode::train);
    EXPECT_EQ(t.logits.value().shape(), (std::vector<int>{2, cfg.num_classes}));
    EXPECT_EQ(t.feature_map.value().shape(),
              (std::vector<int>{2, cfg.channels, cfg.grid_side, cfg.grid_side}));
}

TEST(SingleBranch, ProbedFiniteDifferenceAgreement) {
    SeededRng rng(17);
    SingleBranchClassifier<double> net(ClsConfig::tiny(), rng);
    auto data_rng = rng.split(1);
    auto x = random_normal<double>({2, 3, 16, 16}, 0.0, 0.5, data_rng);
    const std::vector<int> labels{1, 0};
    auto params = net.params();
    auto graph_loss = [&]() { return cross_entropy_loss(net.forward(x, Mode::train), labels); };
    auto loss = graph_loss();
    backward(loss);
    std::vector<Tensor<double>> values, analytic;
    for (auto& [name, v] : params) {
        values.push_back(v.value());
        analytic.push_back(v.grad());
    }
    auto probe_rng = rng.split(2);
    double err = probe_gradient_rel_error(
        [&](const std::vector<Tensor<double>>& vs) {
            for (std::size_t i = 0; i < vs.size(); ++i) params[i].second.value_mut() = vs[i];
            return graph_loss().value()[0];
        },
        values, analytic, 20, probe_rng);
    EXPECT_LT(err, 1e-4);
}
