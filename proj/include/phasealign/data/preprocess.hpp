#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "phasealign/detector/box.hpp"

namespace phasealign::data {

inline constexpr double kWindowLow = -150.0;
inline constexpr double kWindowHigh = 250.0;

/// Clip to the abdominal window and rescale to [0, 1].
inline double hu_window(double hu) {
    return (std::clamp(hu, kWindowLow, kWindowHigh) - kWindowLow) / (kWindowHigh - kWindowLow);
}

inline void hu_window(std::vector<float>& values) {
    for (auto& v : values) v = static_cast<float>(hu_window(static_cast<double>(v)));
}

/// Row-major binary image.
struct Mask {
    int height = 0, width = 0;
    std::vector<std::uint8_t> bits;

    Mask() = default;
    Mask(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}

    std::uint8_t& at(int y, int x) { return bits[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
    std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
    bool empty() const { return count() == 0; }
    bool operator==(const Mask&) const = default;
};

/// Normalised 1D Gaussian taps; the 2D kernel is their outer product.
inline std::vector<double> gaussian_taps(int size, double sigma) {
    if (size < 1 || size % 2 == 0) throw std::invalid_argument("gaussian kernel size must be odd and positive");
    std::vector<double> k(static_cast<std::size_t>(size));
    const int r = size / 2;
    double s = 0;
    for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= s;
    return k;
}

/// Separable Gaussian blur of a binary mask, replicate border.
inline std::vector<double> gaussian_blur(const Mask& m, int size = 11, double sigma = 2.0) {
    const auto k = gaussian_taps(size, sigma);
    const int r = size / 2, H = m.height, W = m.width;
    std::vector<double> tmp(static_cast<std::size_t>(H) * W), out(tmp.size());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0;
            for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * m.at(y, std::clamp(x + i, 0, W - 1));
            tmp[static_cast<std::size_t>(y) * W + x] = acc;
        }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0;
            for (int i = -r; i <= r; ++i)
                acc += k[static_cast<std::size_t>(i + r)] * tmp[static_cast<std::size_t>(std::clamp(y + i, 0, H - 1)) * W + x];
            out[static_cast<std::size_t>(y) * W + x] = acc;
        }
    return out;
}

/// Largest 8-connected component. Ties go to the component found first in raster order.
inline Mask largest_component(const Mask& m) {
    const int H = m.height, W = m.width;
    std::vector<int> label(static_cast<std::size_t>(H) * W, 0);
    int best = 0, next = 0;
    std::size_t best_size = 0;
    std::vector<int> stack;
    for (int start = 0; start < H * W; ++start) {
        if (!m.bits[static_cast<std::size_t>(start)] || label[static_cast<std::size_t>(start)]) continue;
        const int id = ++next;
        std::size_t size = 0;
        stack.assign(1, start);
        label[static_cast<std::size_t>(start)] = id;
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            ++size;
            const int py = p / W, px = p % W;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int y = py + dy, x = px + dx;
                    if (y < 0 || y >= H || x < 0 || x >= W) continue;
                    const int q = y * W + x;
                    if (m.bits[static_cast<std::size_t>(q)] && !label[static_cast<std::size_t>(q)]) {
                        label[static_cast<std::size_t>(q)] = id;
                        stack.push_back(q);
                    }
                }
        }
        if (size > best_size) best_size = size, best = id;
    }
    Mask out(H, W);
    for (std::size_t i = 0; i < out.bits.size(); ++i) out.bits[i] = label[i] == best && best != 0;
    return out;
}

/// Pixel-edge bounding box of the set bits; nullopt when the mask is empty.
inline std::optional<Box> bounding_box(const Mask& m) {
    int y0 = m.height, y1 = -1, x0 = m.width, x1 = -1;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (m.at(y, x)) y0 = std::min(y0, y), y1 = std::max(y1, y), x0 = std::min(x0, x), x1 = std::max(x1, x);
    if (y1 < 0) return std::nullopt;
    return Box::from_corners(x0, y0, x1 + 1, y1 + 1);
}

/// Gaussian blur (11x11 by default) thresholded at 0.5. Smooths jagged contours.
inline Mask smooth_mask(const Mask& m, int kernel = 11, double sigma = 2.0) {
    const auto blurred = gaussian_blur(m, kernel, sigma);
    Mask out(m.height, m.width);
    for (std::size_t i = 0; i < out.bits.size(); ++i) out.bits[i] = blurred[i] >= 0.5;
    return out;
}

/// Smooth, keep the largest component and box it. Returns nullopt for an empty mask
/// (no lesion).
inline std::optional<Box> mask_to_box(const Mask& m, int kernel = 11, double sigma = 2.0) {
    if (m.empty()) return std::nullopt;
    return bounding_box(largest_component(smooth_mask(m, kernel, sigma)));
}

}  // namespace phasealign::data
