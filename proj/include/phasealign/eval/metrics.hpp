#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "phasealign/data/phantom.hpp"
#include "phasealign/detector/box.hpp"

namespace phasealign::eval {

using data::Mask;

/// 2|a & b| / (|a| + |b|); two empty masks give 0.
inline double dice(const Mask& a, const Mask& b) {
    if (a.height != b.height || a.width != b.width)
        throw std::invalid_argument("dice: mask shapes differ (" + std::to_string(a.height) + "x" + std::to_string(a.width) +
                                    " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.bits.size(); ++i) {
        na += a.bits[i];
        nb += b.bits[i];
        inter += a.bits[i] & b.bits[i];
    }
    return na + nb == 0 ? 0.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

/// Mean of the non-zero values; nullopt when every value is zero.
inline std::optional<double> mean_excluding_zero(const std::vector<double>& values) {
    double s = 0;
    std::size_t n = 0;
    for (double v : values)
        if (v != 0.0) s += v, ++n;
    if (n == 0) return std::nullopt;
    return s / static_cast<double>(n);
}

/// Liver Dice of every phase against the portal reference, per sample.
inline std::vector<double> liver_dice_pairs(const data::MultiphaseSample& s) {
    std::vector<double> out;
    for (int p = 0; p < data::kPhases; ++p)
        if (p != data::kPortal)
            out.push_back(dice(s.liver_mask[static_cast<std::size_t>(p)], s.liver_mask[data::kPortal]));
    return out;
}

/// Mean inter-phase liver Dice over a dataset, zero pairs excluded.
inline std::optional<double> mismatch_level(const std::vector<data::MultiphaseSample>& samples) {
    std::vector<double> all;
    for (const auto& s : samples) {
        auto d = liver_dice_pairs(s);
        all.insert(all.end(), d.begin(), d.end());
    }
    return mean_excluding_zero(all);
}

/// 1 - perf_unregistered / perf_registered; nullopt when the registered value is not positive.
inline std::optional<double> sensitivity(double perf_unregistered, double perf_registered) {
    if (!(perf_registered > 0)) return std::nullopt;
    return 1.0 - perf_unregistered / perf_registered;
}

// ---------------------------------------------------------------- average precision

using OverlapFn = std::function<double(const Box& pred, const Box& gt)>;

struct PRPoint {
    double score = 0, precision = 0, recall = 0;
};

struct PRCurve {
    std::vector<PRPoint> points;  // one per distinct score, descending
    std::size_t num_gt = 0;
    std::size_t true_positives = 0;
    std::size_t false_positives = 0;
    std::optional<double> ap;  // absent without ground truth
};

/// Area under the step precision/recall curve with the precision envelope
/// p(r) = max precision at recall >= r.
inline double interpolated_area(const std::vector<PRPoint>& points) {
    double area = 0, prev_recall = 0, envelope = 0;
    std::vector<double> env(points.size());
    for (std::size_t k = points.size(); k-- > 0;) env[k] = envelope = std::max(envelope, points[k].precision);
    for (std::size_t k = 0; k < points.size(); ++k) {
        area += (points[k].recall - prev_recall) * env[k];
        prev_recall = points[k].recall;
    }
    return area;
}

/// Global score-descending sweep. Each prediction takes the highest-overlap GT of its image
/// that is still unmatched; overlap >= thr makes it a true positive. Tied scores enter the
/// curve together.
inline PRCurve average_precision(const std::vector<std::vector<Box>>& preds, const std::vector<std::vector<Box>>& gts,
                                 const OverlapFn& overlap, double thr) {
    if (preds.size() != gts.size()) throw std::invalid_argument("average_precision: prediction/GT image counts differ");
    struct Ref {
        std::size_t image, index;
        double score;
    };
    std::vector<Ref> order;
    PRCurve curve;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        curve.num_gt += gts[i].size();
        for (std::size_t j = 0; j < preds[i].size(); ++j) order.push_back({i, j, preds[i][j].score});
    }
    std::stable_sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });

    std::vector<std::vector<bool>> taken(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) taken[i].assign(gts[i].size(), false);
    std::size_t tp = 0, fp = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        const auto& r = order[k];
        const Box& p = preds[r.image][r.index];
        double best = -1;
        std::size_t best_gt = 0;
        for (std::size_t g = 0; g < gts[r.image].size(); ++g) {
            if (taken[r.image][g]) continue;
            const double o = overlap(p, gts[r.image][g]);
            if (o > best) best = o, best_gt = g;
        }
        if (best >= thr) {
            taken[r.image][best_gt] = true;
            ++tp;
        } else {
            ++fp;
        }
        const bool boundary = k + 1 == order.size() || order[k + 1].score != r.score;
        if (boundary && curve.num_gt > 0)
            curve.points.push_back({r.score, static_cast<double>(tp) / static_cast<double>(tp + fp),
                                    static_cast<double>(tp) / static_cast<double>(curve.num_gt)});
    }
    curve.true_positives = tp;
    curve.false_positives = fp;
    if (curve.num_gt > 0) curve.ap = interpolated_area(curve.points);
    return curve;
}

inline OverlapFn iou_overlap() {
    return [](const Box& p, const Box& g) { return iou(p, g); };
}
inline OverlapFn iobb_overlap(IobbDenominator d = IobbDenominator::predicted) {
    return [d](const Box& p, const Box& g) { return iobb(p, g, d); };
}

}  // namespace phasealign::eval
