#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "derma/gradcheck.hpp"
#include "derma/losses.hpp"
#include "derma/metrics.hpp"
#include "derma/rng.hpp"

using namespace derma;

namespace {

MaskPair<double> make_pair(const Tensor<double>& p, const Tensor<double>& y, double eps = 1e-6) {
    return MaskPair<double>(Var<double>::leaf(p), Var<double>::leaf(y), eps);
}

}  // namespace

TEST(DiceLoss, PerfectOverlapIsZero) {
    Tensor<double> m({4}, {1, 1, 0, 0});
    EXPECT_NEAR(dice_loss(make_pair(m, m)).value()[0], 0.0, 1e-9);
}

TEST(DiceLoss, AllWrongWithUnitSmoothing) {
    Tensor<double> p({4}, {1, 1, 1, 1});
    Tensor<double> y({4}, {0, 0, 0, 0});
    EXPECT_NEAR(dice_loss(make_pair(p, y, 1.0)).value()[0], 0.8, 1e-12);
}

TEST(DiceLoss, HalfProbabilitiesNoSmoothing) {
    Tensor<double> p({2}, {0.5, 0.5});
    Tensor<double> y({2}, {1, 0});
    EXPECT_NEAR(dice_loss(make_pair(p, y, 0.0)).value()[0], 0.5, 1e-12);
}

TEST(DiceLoss, SymmetricForBinaryPredictions) {
    SeededRng rng(1);
    Tensor<double> a({16}), b({16});
    for (int i = 0; i < 16; ++i) {
        a[i] = rng.next_bernoulli(0.5) ? 1.0 : 0.0;
        b[i] = rng.next_bernoulli(0.5) ? 1.0 : 0.0;
    }
    EXPECT_NEAR(dice_loss(make_pair(a, b)).value()[0], dice_loss(make_pair(b, a)).value()[0],
                1e-12);
}

TEST(DiceLoss, DecreasesWithOverlap) {
    // Same pred mass, same truth mass, growing intersection.
    Tensor<double> y({4}, {1, 1, 0, 0});
    Tensor<double> p_low({4}, {0, 0, 1, 1});
    Tensor<double> p_mid({4}, {1, 0, 1, 0});
    Tensor<double> p_high({4}, {1, 1, 0, 0});
    const double l0 = dice_loss(make_pair(p_low, y)).value()[0];
    const double l1 = dice_loss(make_pair(p_mid, y)).value()[0];
    const double l2 = dice_loss(make_pair(p_high, y)).value()[0];
    EXPECT_GT(l0, l1);
    EXPECT_GT(l1, l2);
}

TEST(DiceLoss, RejectsShapeMismatch) {
    EXPECT_THROW(make_pair(Tensor<double>({3}), Tensor<double>({4})), std::invalid_argument);
}

TEST(BceLoss, PerfectPredictionNearZero) {
    Tensor<double> p({4}, {1, 1, 0, 0});
    Tensor<double> y({4}, {1, 1, 0, 0});
    EXPECT_LE(bce_loss(make_pair(p, y)).value()[0], 2e-7);
}

TEST(BceLoss, HalfEverywhereIsLogTwo) {
    Tensor<double> p = Tensor<double>::full({8}, 0.5);
    Tensor<double> y({8}, {1, 0, 1, 0, 1, 0, 1, 0});
    EXPECT_NEAR(bce_loss(make_pair(p, y)).value()[0], std::log(2.0), 1e-12);
}

TEST(BceLoss, HandComputedTwoPixel) {
    Tensor<double> p({2}, {0.9, 0.2});
    Tensor<double> y({2}, {1, 0});
    const double expect = 0.5 * (-std::log(0.9) - std::log(0.8));
    EXPECT_NEAR(bce_loss(make_pair(p, y)).value()[0], expect, 1e-9);
}

TEST(BceLoss, NonNegative) {
    SeededRng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        auto p = random_uniform<double>({10}, 0.0, 1.0, rng);
        Tensor<double> y({10});
        for (int i = 0; i < 10; ++i) y[i] = rng.next_bernoulli(0.5) ? 1.0 : 0.0;
        EXPECT_GE(bce_loss(make_pair(p, y)).value()[0], 0.0);
    }
}

TEST(SegMainLoss, SumOfComponents) {
    SeededRng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        auto p = random_uniform<double>({12}, 0.0, 1.0, rng);
        Tensor<double> y({12});
        for (int i = 0; i < 12; ++i) y[i] = rng.next_bernoulli(0.5) ? 1.0 : 0.0;
        const double main = seg_main_loss(make_pair(p, y)).value()[0];
        const double parts =
            bce_loss(make_pair(p, y)).value()[0] + dice_loss(make_pair(p, y)).value()[0];
        EXPECT_NEAR(main, parts, 1e-12);
    }
}

TEST(SegTotalLoss, WeightedCombination) {
    SeededRng rng(4);
    auto pf = random_uniform<double>({8}, 0.0, 1.0, rng);
    auto p1 = random_uniform<double>({8}, 0.0, 1.0, rng);
    auto p2 = random_uniform<double>({8}, 0.0, 1.0, rng);
    Tensor<double> y({8});
    for (int i = 0; i < 8; ++i) y[i] = rng.next_bernoulli(0.5) ? 1.0 : 0.0;
    const double total =
        seg_total_loss(make_pair(pf, y), make_pair(p1, y), make_pair(p2, y)).value()[0];
    const double expect = seg_main_loss(make_pair(pf, y)).value()[0] +
                          0.2 * seg_main_loss(make_pair(p1, y)).value()[0] +
                          0.1 * seg_main_loss(make_pair(p2, y)).value()[0];
    EXPECT_NEAR(total, expect, 1e-12);
}

TEST(SegTotalLoss, AuxGradientScaledByWeight) {
    SeededRng rng(5);
    auto p = random_uniform<double>({6}, 0.1, 0.9, rng);
    auto q = random_uniform<double>({6}, 0.1, 0.9, rng);
    Tensor<double> y({6});
    for (int i = 0; i < 6; ++i) y[i] = rng.next_bernoulli(0.5) ? 1.0 : 0.0;
    // Same tensor used on the final path vs the aux1 path; gradient ratio 0.2.
    auto yv = Var<double>::leaf(y);
    auto grads_of = [&](bool as_aux) {
        auto target = Var<double>::leaf(p, true);
        auto filler1 = Var<double>::leaf(q);
        auto filler2 = Var<double>::leaf(q);
        MaskPair<double> fp(as_aux ? filler1 : target, yv);
        MaskPair<double> a1(as_aux ? target : filler1, yv);
        MaskPair<double> a2(filler2, yv);
        backward(seg_total_loss(fp, a1, a2));
        return target.grad();
    };
    auto g_final = grads_of(false);
    auto g_aux = grads_of(true);
    for (int i = 0; i < 6; ++i) EXPECT_NEAR(g_aux[i], 0.2 * g_final[i], 1e-10);
}

TEST(SegTotalLoss, RejectsMismatchedTruth) {
    Tensor<double> p({4}, {0.5, 0.5, 0.5, 0.5});
    Tensor<double> y1({4}, {1, 0, 1, 0});
    Tensor<double> y2({4}, {1, 1, 1, 0});
    EXPECT_THROW(
        seg_total_loss(make_pair(p, y1), make_pair(p, y2), make_pair(p, y1)).value(),
        std::invalid_argument);
}

TEST(SegLosses, GradientsMatchFiniteDifferences) {
    SeededRng rng(6);
    auto p = random_uniform<double>({2, 1, 4, 4}, 0.05, 0.95, rng);
    Tensor<double> y({2, 1, 4, 4});
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] = rng.next_bernoulli(0.4) ? 1.0 : 0.0;
    auto f = [&y](const std::vector<Var<double>>& params) {
        MaskPair<double> pair(sigmoid(params[0]), Var<double>::leaf(y));
        return seg_main_loss(pair);
    };
    auto logits = random_normal<double>({2, 1, 4, 4}, 0.0, 1.0, rng);
    auto [value, grads] = forward_and_backward<double>(f, {logits});
    (void)value;
    auto fd = finite_difference_gradient(
        [&f](const std::vector<Tensor<double>>& params) {
            std::vector<Var<double>> leaves{Var<double>::leaf(params[0], false)};
            return f(leaves).value()[0];
        },
        {logits});
    EXPECT_LT(max_gradient_rel_error(grads, fd), 1e-4);
}

TEST(CrossEntropy, UniformLogits) {
    Tensor<double> logits({1, 7});
    EXPECT_NEAR(cross_entropy_loss(logits, {3}).value()[0], std::log(7.0), 1e-12);
}

TEST(CrossEntropy, SaturatedLogits) {
    Tensor<double> logits({1, 4});
    logits.at(0, 2) = 20.0;
    EXPECT_LE(cross_entropy_loss(logits, {2}).value()[0], 1e-6);
}

TEST(CrossEntropy, RejectsBadLabels) {
    Tensor<double> logits({2, 3});
    EXPECT_THROW(cross_entropy_loss(logits, {0, 3}), std::invalid_argument);
    EXPECT_THROW(cross_entropy_loss(logits, {-1, 0}), std::invalid_argument);
    EXPECT_THROW(cross_entropy_loss(logits, {0}), std::invalid_argument);
}

TEST(CrossEntropy, GradientsMatchFiniteDifferences) {
    SeededRng rng(7);
    auto logits = random_normal<double>({3, 5}, 0.0, 2.0, rng);
    std::vector<int> labels{4, 0, 2};
    auto [value, grads] = forward_and_backward<double>(
        [&labels](const std::vector<Var<double>>& p) { return cross_entropy_loss(p[0], labels); },
        {logits});
    (void)value;
    auto fd = finite_difference_gradient(
        [&labels](const std::vector<Tensor<double>>& p) {
            return cross_entropy_loss(Var<double>::leaf(p[0]), labels).value()[0];
        },
        {logits});
    EXPECT_LT(max_gradient_rel_error(grads, fd), 1e-5);
}

TEST(CrossEntropy, LargeLogitsStayFinite) {
    Tensor<double> logits({1, 3}, {1000.0, -1000.0, 999.0});
    const double v = cross_entropy_loss(logits, {1}).value()[0];
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GT(v, 1000.0);
}

TEST(DiceIou, IdenticalMasks) {
    Tensor<double> m({2, 2}, {1, 0, 1, 1});
    auto s = metrics::dice_iou_metrics(m, m);
    EXPECT_DOUBLE_EQ(s.dice, 1.0);
    EXPECT_DOUBLE_EQ(s.iou, 1.0);
}

TEST(DiceIou, DisjointMasks) {
    Tensor<double> a({4}, {1, 1, 0, 0});
    Tensor<double> b({4}, {0, 0, 1, 1});
    auto s = metrics::dice_iou_metrics(a, b);
    EXPECT_DOUBLE_EQ(s.dice, 0.0);
    EXPECT_DOUBLE_EQ(s.iou, 0.0);
}

TEST(DiceIou, PartialOverlapSetArithmetic) {
    // |A| = |B| = 4, |A∩B| = 2.
    Tensor<double> a({8}, {1, 1, 1, 1, 0, 0, 0, 0});
    Tensor<double> b({8}, {1, 1, 0, 0, 1, 1, 0, 0});
    auto s = metrics::dice_iou_metrics(a, b);
    EXPECT_DOUBLE_EQ(s.dice, 0.5);
    EXPECT_NEAR(s.iou, 1.0 / 3.0, 1e-15);
}

TEST(DiceIou, BothEmptyIsPerfect) {
    Tensor<double> z({4});
    auto s = metrics::dice_iou_metrics(z, z);
    EXPECT_DOUBLE_EQ(s.dice, 1.0);
    EXPECT_DOUBLE_EQ(s.iou, 1.0);
}

TEST(DiceIou, ThresholdBinarizesPrediction) {
    Tensor<double> p({4}, {0.49, 0.51, 0.99, 0.01});
    Tensor<double> y({4}, {0, 1, 1, 0});
    auto s = metrics::dice_iou_metrics(p, y);
    EXPECT_DOUBLE_EQ(s.dice, 1.0);
}

TEST(SegAccumulator, MergeEqualsSequential) {
    metrics::SegMetricAccumulator a, b, all;
    const metrics::SegScores s1{0.8, 0.7}, s2{0.6, 0.5}, s3{1.0, 1.0};
    a.add(s1);
    a.add(s2);
    b.add(s3);
    all.add(s1);
    all.add(s2);
    all.add(s3);
    a.merge(b);
    EXPECT_DOUBLE_EQ(a.mean().dice, all.mean().dice);
    EXPECT_DOUBLE_EQ(a.mean().iou, all.mean().iou);
    EXPECT_EQ(a.count, 3);
}

TEST(Classification, AllCorrect) {
    Tensor<double> logits({3, 4});
    logits.at(0, 1) = 5.0;
    logits.at(1, 0) = 5.0;
    logits.at(2, 3) = 5.0;
    auto r = metrics::classification_metrics(logits, {1, 0, 3});
    EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
    EXPECT_DOUBLE_EQ(r.top2_accuracy, 1.0);
}

TEST(Classification, ThirdRankedNeverInTopTwo) {
    Tensor<double> logits({2, 4});
    for (int b = 0; b < 2; ++b) {
        logits.at(b, 0) = 3.0;
        logits.at(b, 1) = 2.0;
        logits.at(b, 2) = 1.0;  // always the true class, always 3rd
    }
    auto r = metrics::classification_metrics(logits, {2, 2});
    EXPECT_DOUBLE_EQ(r.top2_accuracy, 0.0);
}

TEST(Classification, HandCountedMixedBatch) {
    // 4 samples: 2 argmax-correct, 1 more only in top-2, 1 outside top-2.
    Tensor<double> logits({4, 3});
    logits.at(0, 0) = 3.0;  // truth 0: correct
    logits.at(1, 1) = 3.0;  // truth 1: correct
    logits.at(2, 0) = 3.0;
    logits.at(2, 2) = 2.0;  // truth 2: second
    logits.at(3, 0) = 3.0;
    logits.at(3, 1) = 2.0;  // truth 2: third
    auto r = metrics::classification_metrics(logits, {0, 1, 2, 2});
    EXPECT_DOUBLE_EQ(r.accuracy, 0.5);
    EXPECT_DOUBLE_EQ(r.top2_accuracy, 0.75);
}

TEST(Classification, TopTwoTieBreaksToLowerIndex) {
    // Classes 1 and 2 tie for second place; lower index 1 takes the slot.
    Tensor<double> logits({1, 3}, {5.0, 2.0, 2.0});
    EXPECT_DOUBLE_EQ(metrics::classification_metrics(logits, {1}).top2_accuracy, 1.0);
    EXPECT_DOUBLE_EQ(metrics::classification_metrics(logits, {2}).top2_accuracy, 0.0);
}

TEST(Classification, ConfusionMatrixInvariants) {
    SeededRng rng(8);
    auto logits = random_normal<double>({40, 5}, 0.0, 1.0, rng);
    std::vector<int> labels(40);
    for (auto& l : labels) l = static_cast<int>(rng.next_index(5));
    auto r = metrics::classification_metrics(logits, labels);
    std::int64_t trace = 0, total = 0;
    std::vector<std::int64_t> truth_counts(5, 0);
    for (int l : labels) ++truth_counts[l];
    for (int i = 0; i < 5; ++i) {
        std::int64_t row = 0;
        for (int j = 0; j < 5; ++j) {
            row += r.confusion[i][j];
            total += r.confusion[i][j];
        }
        trace += r.confusion[i][i];
        EXPECT_EQ(row, truth_counts[i]);
    }
    EXPECT_EQ(total, 40);
    EXPECT_DOUBLE_EQ(static_cast<double>(trace) / total, r.accuracy);
}

TEST(Auc, PerfectSeparation) {
    Tensor<double> scores({4, 2}, {0.9, 0.1, 0.8, 0.2, 0.1, 0.9, 0.2, 0.8});
    EXPECT_DOUBLE_EQ(metrics::auc_ovr(scores, {0, 0, 1, 1}), 1.0);
}

TEST(Auc, AllEqualScoresGiveHalf) {
    Tensor<double> scores = Tensor<double>::full({6, 2}, 0.5);
    EXPECT_DOUBLE_EQ(metrics::auc_ovr(scores, {0, 1, 0, 1, 0, 1}), 0.5);
}

TEST(Auc, BinaryHandComputed) {
    // Column-1 scores [0.1,0.4,0.35,0.8] with labels [0,0,1,1]: 3 of 4
    // positive-negative pairs ranked correctly.
    Tensor<double> scores({4, 2},
                          {0.9, 0.1, 0.6, 0.4, 0.65, 0.35, 0.2, 0.8});
    std::vector<double> per_class;
    metrics::auc_ovr(scores, {0, 0, 1, 1}, &per_class);
    EXPECT_DOUBLE_EQ(per_class[1], 0.75);
}

TEST(Auc, MatchesBruteForcePairwise) {
    SeededRng rng(9);
    for (int trial = 0; trial < 10; ++trial) {
        const int B = 12;
        auto scores = random_uniform<double>({B, 3}, 0.0, 1.0, rng);
        // Quantize so score ties actually occur.
        for (std::int64_t i = 0; i < scores.size(); ++i)
            scores[i] = std::round(scores[i] * 8.0) / 8.0;
        std::vector<int> labels(B);
        for (auto& l : labels) l = static_cast<int>(rng.next_index(3));
        bool has_all = true;
        for (int c = 0; c < 3; ++c) {
            int pos = 0;
            for (int l : labels) pos += l == c;
            has_all = has_all && pos > 0 && pos < B;
        }
        if (!has_all) continue;
        std::vector<double> per_class;
        metrics::auc_ovr(scores, labels, &per_class);
        for (int c = 0; c < 3; ++c) {
            double wins = 0.0;
            std::int64_t pairs = 0;
            for (int i = 0; i < B; ++i) {
                if (labels[i] != c) continue;
                for (int j = 0; j < B; ++j) {
                    if (labels[j] == c) continue;
                    const double si = scores.at(i, c), sj = scores.at(j, c);
                    wins += si > sj ? 1.0 : (si == sj ? 0.5 : 0.0);
                    ++pairs;
                }
            }
            EXPECT_NEAR(per_class[c], wins / pairs, 1e-12);
        }
    }
}

TEST(Auc, MonotoneTransformInvariant) {
    SeededRng rng(10);
    auto scores = random_uniform<double>({10, 2}, 0.1, 0.9, rng);
    std::vector<int> labels{0, 1, 0, 1, 1, 0, 0, 1, 0, 1};
    const double base = metrics::auc_ovr(scores, labels);
    Tensor<double> warped(scores.shape());
    for (std::int64_t i = 0; i < scores.size(); ++i)
        warped[i] = std::exp(3.0 * scores[i]) + 7.0;
    EXPECT_NEAR(metrics::auc_ovr(warped, labels), base, 1e-12);
}

TEST(Auc, ExcludesSinglePolarityClasses) {
    Tensor<double> scores({4, 3}, {0.8, 0.1, 0.1, 0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.2, 0.7, 0.1});
    std::vector<int> excluded;
    std::vector<double> per_class;
    metrics::auc_ovr(scores, {0, 0, 1, 1}, &per_class, &excluded);
    ASSERT_EQ(excluded.size(), 1u);
    EXPECT_EQ(excluded[0], 2);
    EXPECT_TRUE(std::isnan(per_class[2]));
}

TEST(Auc, RejectsWhenNoClassHasBothPolarities) {
    Tensor<double> scores({2, 2}, {0.9, 0.1, 0.8, 0.2});
    EXPECT_THROW(metrics::auc_ovr(scores, {0, 0}), std::invalid_argument);
}

TEST(ClsAccumulator, MergeMatchesSingleShot) {
    SeededRng rng(11);
    auto logits = random_normal<double>({20, 3}, 0.0, 1.0, rng);
    std::vector<int> labels(20);
    for (int i = 0; i < 20; ++i) labels[i] = i % 3;
    metrics::ClsMetricAccumulator<double> left, right;
    Tensor<double> first({12, 3}, std::vector<double>(logits.data(), logits.data() + 36));
    Tensor<double> second({8, 3}, std::vector<double>(logits.data() + 36, logits.data() + 60));
    left.add_batch(first, std::vector<int>(labels.begin(), labels.begin() + 12));
    right.add_batch(second, std::vector<int>(labels.begin() + 12, labels.end()));
    left.merge(right);
    auto merged = left.report();
    auto direct = metrics::classification_metrics(logits, labels);
    EXPECT_DOUBLE_EQ(merged.accuracy, direct.accuracy);
    EXPECT_DOUBLE_EQ(merged.macro_auc, direct.macro_auc);
}

TEST(MetricReport, CsvShapes) {
    Tensor<double> logits({4, 3});
    logits.at(0, 0) = 1.0;
    logits.at(1, 1) = 1.0;
    logits.at(2, 2) = 1.0;
    logits.at(3, 0) = 1.0;
    auto r = metrics::classification_metrics(logits, {0, 1, 2, 1});
    std::ostringstream flat, grid;
    r.write_csv(flat);
    r.write_confusion_csv(grid);
    EXPECT_NE(flat.str().find("metric,accuracy,0.75"), std::string::npos);
    EXPECT_NE(flat.str().find("metric,precision_0,"), std::string::npos);
    // 3 rows of 3 comma-separated counts.
    int lines = 0;
    for (char c : grid.str()) lines += c == '\n';
    EXPECT_EQ(lines, 3);
    EXPECT_NE(grid.str().find("1,0,0"), std::string::npos);
}
