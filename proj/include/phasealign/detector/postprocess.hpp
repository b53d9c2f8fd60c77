#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "phasealign/detector/matching.hpp"

namespace phasealign {

struct DecodeConfig {
    double score_threshold = 0.2;
    double nms_iou = 0.45;
    std::size_t max_detections = 100;
};

/// Greedy suppression on score-descending (stable) order; a box is dropped when its IoU with
/// a kept box reaches `iou_threshold`.
inline std::vector<Box> nms(std::vector<Box> boxes, double iou_threshold, std::size_t max_keep = SIZE_MAX) {
    std::stable_sort(boxes.begin(), boxes.end(), [](const Box& a, const Box& b) { return a.score > b.score; });
    std::vector<Box> kept;
    for (const auto& b : boxes) {
        if (kept.size() >= max_keep) break;
        bool drop = false;
        for (const auto& k : kept)
            if (iou(b, k) >= iou_threshold) {
                drop = true;
                break;
            }
        if (!drop) kept.push_back(b);
    }
    return kept;
}

/// Decodes one image's raw head outputs into final detections.
template <typename V>
std::vector<Box> decode_detections(const V* logits, const V* regressions, const AnchorSet& anchors,
                                   const DecodeConfig& cfg = {}) {
    std::vector<Box> cand;
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        const double d = static_cast<double>(logits[2 * a + 1]) - static_cast<double>(logits[2 * a]);
        const double p = 1.0 / (1.0 + std::exp(-d));
        if (p < cfg.score_threshold) continue;
        Offsets t;
        for (std::size_t j = 0; j < 4; ++j) t[j] = static_cast<double>(regressions[4 * a + j]);
        Box b = decode(t, anchors.boxes[a], p);
        if (std::isfinite(b.w) && std::isfinite(b.h) && b.valid()) cand.push_back(b);
    }
    return nms(std::move(cand), cfg.nms_iou, cfg.max_detections);
}

}  // namespace phasealign
