#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "phasealign/detector/box.hpp"

namespace phasealign {

struct AnchorSource {
    int stride = 8;
    std::vector<double> sizes;
    std::vector<double> ratios{1.0};

    int per_cell() const { return static_cast<int>(sizes.size() * ratios.size()); }
};

struct AnchorSpec {
    std::vector<AnchorSource> sources;

    /// Two source maps at strides 4 and 8 sized for 96 px inputs.
    static AnchorSpec standard() { return {{{4, {12.0, 18.0}, {1.0}}, {8, {26.0, 36.0}, {1.0}}}}; }
};

struct AnchorSet {
    std::vector<Box> boxes;
    std::vector<std::size_t> source_begin;  // first anchor index of each source

    std::size_t size() const { return boxes.size(); }
};

/// Dense anchors, ordered source -> cell (row-major) -> size -> ratio. This matches the
/// layout produced by flatten_head on each source's prediction map.
inline AnchorSet generate_anchors(int height, int width, const AnchorSpec& spec) {
    AnchorSet set;
    for (const auto& src : spec.sources) {
        if (src.stride <= 0 || height % src.stride || width % src.stride)
            throw std::invalid_argument("anchor stride " + std::to_string(src.stride) + " does not divide image " +
                                        std::to_string(height) + "x" + std::to_string(width));
        if (src.sizes.empty() || src.ratios.empty()) throw std::invalid_argument("anchor source without sizes or ratios");
        set.source_begin.push_back(set.boxes.size());
        const int gh = height / src.stride, gw = width / src.stride;
        for (int y = 0; y < gh; ++y)
            for (int x = 0; x < gw; ++x)
                for (double size : src.sizes)
                    for (double ratio : src.ratios) {
                        const double r = std::sqrt(ratio);
                        set.boxes.push_back({(x + 0.5) * src.stride, (y + 0.5) * src.stride, size * r, size / r, 1.0});
                    }
    }
    return set;
}

}  // namespace phasealign
