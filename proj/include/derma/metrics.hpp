#pragma once

// Evaluation metrics. Everything here operates on plain tensors (no autodiff)
// and is pure; accumulators are explicit and mergeable so batched evaluation
// reduces deterministically.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "derma/tensor.hpp"

namespace derma::metrics {

struct SegScores {
    double dice = 0.0;
    double iou = 0.0;
};

/// Dice and IoU for one mask pair after thresholding the prediction.
/// Both-empty counts as perfect agreement (1.0, 1.0).
template <typename T>
SegScores dice_iou_metrics(const Tensor<T>& pred_probs, const Tensor<T>& truth,
                           double threshold = 0.5) {
    if (!pred_probs.same_shape(truth))
        throw std::invalid_argument("dice_iou_metrics: shape mismatch");
    std::int64_t np = 0, nt = 0, inter = 0;
    for (std::int64_t i = 0; i < pred_probs.size(); ++i) {
        const bool p = static_cast<double>(pred_probs[i]) >= threshold;
        const bool t = truth[i] > T(0.5);
        np += p;
        nt += t;
        inter += p && t;
    }
    if (np == 0 && nt == 0) return {1.0, 1.0};
    SegScores s;
    s.dice = 2.0 * static_cast<double>(inter) / static_cast<double>(np + nt);
    const std::int64_t uni = np + nt - inter;
    s.iou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    return s;
}

/// Per-image accumulator for mDice/mIoU; merge() makes batched evaluation a
/// reduction.
struct SegMetricAccumulator {
    double dice_sum = 0.0;
    double iou_sum = 0.0;
    std::int64_t count = 0;

    void add(const SegScores& s) {
        dice_sum += s.dice;
        iou_sum += s.iou;
        ++count;
    }
    void merge(const SegMetricAccumulator& other) {
        dice_sum += other.dice_sum;
        iou_sum += other.iou_sum;
        count += other.count;
    }
    SegScores mean() const {
        if (count == 0) throw std::invalid_argument("SegMetricAccumulator: empty");
        return {dice_sum / count, iou_sum / count};
    }
};

struct MetricReport {
    double accuracy = 0.0;
    double top2_accuracy = 0.0;
    double macro_auc = 0.0;
    std::vector<double> precision;                   // per class; 0 when never predicted
    std::vector<double> recall;                      // per class; 0 when class absent
    std::vector<double> per_class_auc;               // NaN for excluded classes
    std::vector<int> auc_excluded;                   // classes lacking a score polarity
    std::vector<std::vector<std::int64_t>> confusion;  // rows = truth, cols = prediction
    std::int64_t total = 0;

    /// Flat `metric,name,value` lines.
    void write_csv(std::ostream& os) const {
        os << "metric,accuracy," << accuracy << "\n";
        os << "metric,top2_accuracy," << top2_accuracy << "\n";
        if (!std::isnan(macro_auc)) os << "metric,macro_auc," << macro_auc << "\n";
        for (std::size_t c = 0; c < precision.size(); ++c) {
            os << "metric,precision_" << c << "," << precision[c] << "\n";
            os << "metric,recall_" << c << "," << recall[c] << "\n";
        }
        for (std::size_t c = 0; c < per_class_auc.size(); ++c)
            if (!std::isnan(per_class_auc[c]))
                os << "metric,auc_" << c << "," << per_class_auc[c] << "\n";
    }

    /// C x C comma grid, one truth row per line.
    void write_confusion_csv(std::ostream& os) const {
        for (const auto& row : confusion) {
            for (std::size_t j = 0; j < row.size(); ++j) os << (j ? "," : "") << row[j];
            os << "\n";
        }
    }
};

namespace detail {

/// Class indices ordered by descending logit; equal logits keep ascending
/// index order, so "top two" is deterministic under ties.
template <typename T>
std::vector<int> rank_classes(const T* row, int C) {
    std::vector<int> idx(C);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [row](int a, int b) { return row[a] > row[b]; });
    return idx;
}

}  // namespace detail

/// Rank-based one-vs-rest AUC, macro-averaged over classes that have both a
/// positive and a negative example. Fills per-class results and the excluded
/// list; throws when no class qualifies.
template <typename T>
double auc_ovr(const Tensor<T>& scores, const std::vector<int>& labels,
               std::vector<double>* per_class = nullptr, std::vector<int>* excluded = nullptr) {
    if (scores.rank() != 2) throw std::invalid_argument("auc_ovr: scores must be (B,C)");
    const int B = scores.shape()[0], C = scores.shape()[1];
    if (static_cast<int>(labels.size()) != B)
        throw std::invalid_argument("auc_ovr: labels size mismatch");

    if (per_class) per_class->assign(C, std::nan(""));
    if (excluded) excluded->clear();
    double total = 0.0;
    int included = 0;
    std::vector<std::pair<double, int>> order(B);  // (score, row)
    std::vector<double> rank(B);
    for (int c = 0; c < C; ++c) {
        std::int64_t n_pos = 0;
        for (int b = 0; b < B; ++b) n_pos += labels[b] == c;
        const std::int64_t n_neg = B - n_pos;
        if (n_pos == 0 || n_neg == 0) {
            if (excluded) excluded->push_back(c);
            std::cerr << "auc_ovr: class " << c << " lacks a polarity, excluded from macro AUC\n";
            continue;
        }
        for (int b = 0; b < B; ++b)
            order[b] = {static_cast<double>(scores[static_cast<std::int64_t>(b) * C + c]), b};
        std::sort(order.begin(), order.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        // Average ranks across ties (1-based).
        int i = 0;
        while (i < B) {
            int j = i;
            while (j < B && order[j].first == order[i].first) ++j;
            const double r = 0.5 * ((i + 1) + j);
            for (int k = i; k < j; ++k) rank[order[k].second] = r;
            i = j;
        }
        double rank_sum_pos = 0.0;
        for (int b = 0; b < B; ++b)
            if (labels[b] == c) rank_sum_pos += rank[b];
        const double auc =
            (rank_sum_pos - 0.5 * static_cast<double>(n_pos) * (n_pos + 1)) /
            (static_cast<double>(n_pos) * static_cast<double>(n_neg));
        if (per_class) (*per_class)[c] = auc;
        total += auc;
        ++included;
    }
    if (included == 0) throw std::invalid_argument("auc_ovr: no class has both polarities");
    return total / included;
}

/// Accuracy, top-2 accuracy, macro AUC, per-class precision/recall, and the
/// confusion matrix from raw logits.
template <typename T>
MetricReport classification_metrics(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw std::invalid_argument("classification_metrics: logits must be (B,C)");
    const int B = logits.shape()[0], C = logits.shape()[1];
    if (B < 1) throw std::invalid_argument("classification_metrics: empty batch");
    if (static_cast<int>(labels.size()) != B)
        throw std::invalid_argument("classification_metrics: labels size mismatch");
    for (int label : labels)
        if (label < 0 || label >= C)
            throw std::invalid_argument("classification_metrics: label out of range");

    MetricReport r;
    r.total = B;
    r.confusion.assign(C, std::vector<std::int64_t>(C, 0));
    std::int64_t correct = 0, top2 = 0;
    for (int b = 0; b < B; ++b) {
        const T* row = logits.data() + static_cast<std::int64_t>(b) * C;
        auto ranked = detail::rank_classes(row, C);
        r.confusion[labels[b]][ranked[0]] += 1;
        correct += ranked[0] == labels[b];
        top2 += ranked[0] == labels[b] || (C > 1 && ranked[1] == labels[b]);
    }
    r.accuracy = static_cast<double>(correct) / B;
    r.top2_accuracy = static_cast<double>(top2) / B;
    r.precision.assign(C, 0.0);
    r.recall.assign(C, 0.0);
    for (int c = 0; c < C; ++c) {
        std::int64_t col = 0, row_sum = 0;
        for (int k = 0; k < C; ++k) {
            col += r.confusion[k][c];
            row_sum += r.confusion[c][k];
        }
        if (col > 0) r.precision[c] = static_cast<double>(r.confusion[c][c]) / col;
        if (row_sum > 0) r.recall[c] = static_cast<double>(r.confusion[c][c]) / row_sum;
    }
    try {
        r.macro_auc = auc_ovr(logits, labels, &r.per_class_auc, &r.auc_excluded);
    } catch (const std::invalid_argument&) {
        // Single-class label sets have no defined AUC; the other metrics stand.
        r.macro_auc = std::nan("");
    }
    return r;
}

/// Mergeable score/label store; AUC and ranking metrics need the full set, so
/// batches append here and the report is computed once at the end.
template <typename T>
struct ClsMetricAccumulator {
    std::vector<T> scores;  // row-major (n, C)
    std::vector<int> labels;
    int num_classes = 0;

    void add_batch(const Tensor<T>& logits, const std::vector<int>& batch_labels) {
        if (logits.rank() != 2) throw std::invalid_argument("ClsMetricAccumulator: logits must be (B,C)");
        if (num_classes == 0) num_classes = logits.shape()[1];
        if (logits.shape()[1] != num_classes)
            throw std::invalid_argument("ClsMetricAccumulator: class count changed");
        if (static_cast<int>(batch_labels.size()) != logits.shape()[0])
            throw std::invalid_argument("ClsMetricAccumulator: labels size mismatch");
        scores.insert(scores.end(), logits.data(), logits.data() + logits.size());
        labels.insert(labels.end(), batch_labels.begin(), batch_labels.end());
    }
    void merge(const ClsMetricAccumulator& other) {
        if (other.num_classes == 0) return;
        if (num_classes == 0) num_classes = other.num_classes;
        if (num_classes != other.num_classes)
            throw std::invalid_argument("ClsMetricAccumulator: class count mismatch");
        scores.insert(scores.end(), other.scores.begin(), other.scores.end());
        labels.insert(labels.end(), other.labels.begin(), other.labels.end());
    }
    MetricReport report() const {
        if (labels.empty()) throw std::invalid_argument("ClsMetricAccumulator: empty");
        Tensor<T> logits({static_cast<int>(labels.size()), num_classes}, scores);
        return classification_metrics(logits, labels);
    }
};

}  // namespace derma::metrics
