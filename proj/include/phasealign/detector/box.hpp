#pragma once

#include <algorithm>
#include <cmath>

namespace phasealign {

/// Axis-aligned box in image pixel units, centre form. `score` is only meaningful for
/// predictions.
struct Box {
    double cx = 0, cy = 0, w = 0, h = 0;
    double score = 1.0;

    static Box from_corners(double x0, double y0, double x1, double y1, double score = 1.0) {
        return {(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, score};
    }

    double x0() const { return cx - w / 2; }
    double y0() const { return cy - h / 2; }
    double x1() const { return cx + w / 2; }
    double y1() const { return cy + h / 2; }
    double area() const { return w * h; }
    bool valid() const { return w > 0 && h > 0; }

    Box mirrored_x(double image_width) const { return {image_width - cx, cy, w, h, score}; }
};

inline double intersection_area(const Box& a, const Box& b) {
    const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
    const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
    return (iw > 0 && ih > 0) ? iw * ih : 0.0;
}

/// Intersection over union.
inline double iou(const Box& a, const Box& b) {
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

enum class IobbDenominator { predicted, ground_truth };

/// Intersection over bounding box: intersection divided by the detected box area, or by
/// the ground-truth area when requested.
inline double iobb(const Box& pred, const Box& gt, IobbDenominator denom = IobbDenominator::predicted) {
    const double inter = intersection_area(pred, gt);
    const double area = denom == IobbDenominator::predicted ? pred.area() : gt.area();
    return area > 0 ? inter / area : 0.0;
}

}  // namespace phasealign
