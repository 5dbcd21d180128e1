#pragma once

#include <algorithm>
#include <vector>

#include "fence/common.hpp"

namespace fence {

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
    double threshold = 0.0;
};

/// Threshold sweep over the unique score values, descending. Points run
/// from (0,0) to (1,1); ties are grouped so the curve is well defined.
inline std::vector<RocPoint> roc_points(const Vec& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw DataError("roc: scores/labels size mismatch");
    size_t pos = 0, neg = 0;
    for (int y : labels) (y == 1 ? pos : neg)++;
    if (pos == 0 || neg == 0) throw DataError("roc: need both classes");

    std::vector<size_t> idx(scores.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    std::vector<RocPoint> pts;
    pts.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    size_t tp = 0, fp = 0;
    size_t i = 0;
    while (i < idx.size()) {
        double s = scores[idx[i]];
        while (i < idx.size() && scores[idx[i]] == s) {
            (labels[idx[i]] == 1 ? tp : fp)++;
            ++i;
        }
        pts.push_back({double(fp) / double(neg), double(tp) / double(pos), s});
    }
    return pts;
}

/// Trapezoid integration of an ROC curve.
inline double auc(const std::vector<RocPoint>& pts) {
    double area = 0.0;
    for (size_t i = 1; i < pts.size(); ++i)
        area += (pts[i].fpr - pts[i - 1].fpr) * (pts[i].tpr + pts[i - 1].tpr) * 0.5;
    return area;
}

inline double roc_auc(const Vec& scores, const std::vector<int>& labels) {
    return auc(roc_points(scores, labels));
}

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
    if (preds.empty() || preds.size() != labels.size()) throw DataError("accuracy: bad input");
    size_t ok = 0;
    for (size_t i = 0; i < preds.size(); ++i) ok += preds[i] == labels[i];
    return double(ok) / double(preds.size());
}

inline double f1_score(const std::vector<int>& preds, const std::vector<int>& labels) {
    if (preds.size() != labels.size()) throw DataError("f1: size mismatch");
    size_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] == 1 && labels[i] == 1) ++tp;
        if (preds[i] == 1 && labels[i] == 0) ++fp;
        if (preds[i] == 0 && labels[i] == 1) ++fn;
    }
    return (2 * tp + fp + fn) > 0 ? 2.0 * double(tp) / double(2 * tp + fp + fn) : 0.0;
}

}  // namespace fence
