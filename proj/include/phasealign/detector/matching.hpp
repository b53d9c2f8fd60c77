#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "phasealign/detector/anchors.hpp"

namespace phasealign {

inline constexpr double kCenterVariance = 0.1;
inline constexpr double kSizeVariance = 0.2;
// exp() argument cap when decoding size offsets
inline constexpr double kMaxLogScale = 8.0;

using Offsets = std::array<double, 4>;

/// SSD encoding of `gt` relative to `anchor`.
inline Offsets encode(const Box& gt, const Box& anchor) {
    return {(gt.cx - anchor.cx) / (anchor.w * kCenterVariance), (gt.cy - anchor.cy) / (anchor.h * kCenterVariance),
            std::log(gt.w / anchor.w) / kSizeVariance, std::log(gt.h / anchor.h) / kSizeVariance};
}

inline Box decode(const Offsets& t, const Box& anchor, double score = 1.0) {
    return {anchor.cx + t[0] * kCenterVariance * anchor.w, anchor.cy + t[1] * kCenterVariance * anchor.h,
            anchor.w * std::exp(std::min(t[2] * kSizeVariance, kMaxLogScale)),
            anchor.h * std::exp(std::min(t[3] * kSizeVariance, kMaxLogScale)), score};
}

inline constexpr int kNegative = -1;
inline constexpr int kIgnored = -2;

struct MatchResult {
    std::vector<int> label;  // GT index for positives, kNegative or kIgnored otherwise
    std::vector<Offsets> targets;  // encoded GT for positives, zeros elsewhere
    std::size_t positives = 0;

    bool positive(std::size_t a) const { return label[a] >= 0; }
};

/// IoU >= pos_thr: positive; < neg_thr: negative; otherwise ignored. Each GT's best anchor
/// is forced positive (first anchor on ties; later GTs win a shared best anchor).
inline MatchResult match_anchors(const AnchorSet& anchors, const std::vector<Box>& gts, double pos_thr = 0.5,
                                 double neg_thr = 0.4) {
    if (pos_thr < neg_thr) throw std::invalid_argument("match_anchors: positive threshold below negative threshold");
    const std::size_t A = anchors.size();
    MatchResult m;
    m.label.assign(A, kNegative);
    m.targets.assign(A, Offsets{});
    if (gts.empty()) return m;

    std::vector<double> best_iou(A, -1.0);
    std::vector<int> best_gt(A, kNegative);
    std::vector<std::size_t> gt_best_anchor(gts.size(), 0);
    std::vector<double> gt_best_iou(gts.size(), -1.0);
    for (std::size_t a = 0; a < A; ++a)
        for (std::size_t g = 0; g < gts.size(); ++g) {
            const double o = iou(anchors.boxes[a], gts[g]);
            if (o > best_iou[a]) best_iou[a] = o, best_gt[a] = static_cast<int>(g);
            if (o > gt_best_iou[g]) gt_best_iou[g] = o, gt_best_anchor[g] = a;
        }
    for (std::size_t a = 0; a < A; ++a) {
        if (best_iou[a] >= pos_thr) m.label[a] = best_gt[a];
        else if (best_iou[a] >= neg_thr) m.label[a] = kIgnored;
    }
    for (std::size_t g = 0; g < gts.size(); ++g) m.label[gt_best_anchor[g]] = static_cast<int>(g);
    for (std::size_t a = 0; a < A; ++a)
        if (m.label[a] >= 0) {
            m.targets[a] = encode(gts[static_cast<std::size_t>(m.label[a])], anchors.boxes[a]);
            ++m.positives;
        }
    return m;
}

}  // namespace phasealign
