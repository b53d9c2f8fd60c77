#pragma once

#include <filesystem>

#include "phasealign/data/phantom.hpp"
#include "phasealign/io.hpp"

namespace phasealign::data {

inline constexpr int kDatasetVersion = 1;

namespace detail {

inline io::json box_json(const Box& b) { return {b.cx, b.cy, b.w, b.h}; }
inline Box box_from_json(const io::json& j) { return {j.at(0), j.at(1), j.at(2), j.at(3), 1.0}; }

inline std::vector<std::uint8_t> pack_masks(const std::array<Mask, kPhases>& masks) {
    std::vector<std::uint8_t> out;
    for (const auto& m : masks) out.insert(out.end(), m.bits.begin(), m.bits.end());
    return out;
}

}  // namespace detail

/// Header: {format, version, count, image_size, channels, split, specs, samples:[meta]}.
/// Payload per sample, in order: float32 image [12,S,S], uint8 lesion masks [4,S,S],
/// uint8 liver masks [4,S,S]. Every sample block has the same size, so sample i sits at
/// a fixed offset.
inline void write_dataset(const std::filesystem::path& path, const std::vector<MultiphaseSample>& samples,
                          const io::json& extra = io::json::object()) {
    const int S = samples.empty() ? 0 : samples.front().size;
    io::json header{{"format", "phasealign-dataset"},
                    {"version", kDatasetVersion},
                    {"count", samples.size()},
                    {"image_size", S},
                    {"channels", kPhases * kSlices},
                    {"extra", extra},
                    {"samples", io::json::array()}};
    for (const auto& s : samples) {
        if (s.size != S) throw std::invalid_argument("write_dataset: samples have different image sizes");
        io::json boxes = io::json::array();
        for (const auto& b : s.gt_boxes) boxes.push_back(detail::box_json(b));
        io::json warps = io::json::array();
        for (const auto& w : s.warps) warps.push_back(to_json(w));
        header["samples"].push_back({{"seed", s.seed},
                                     {"boxes", boxes},
                                     {"annotation_phase", s.annotation_phase},
                                     {"misalignment", to_json(s.misalignment)},
                                     {"warps", warps}});
    }
    io::FramedWriter out(path, header);
    for (const auto& s : samples) {
        out.write(s.image);
        out.write(detail::pack_masks(s.lesion_mask));
        out.write(detail::pack_masks(s.liver_mask));
    }
    out.close();
}

/// Random-access reader over a dataset container.
class DatasetReader {
   public:
    explicit DatasetReader(const std::filesystem::path& path) : path_(path), in_(path) {
        const auto& h = in_.header();
        if (h.value("format", "") != "phasealign-dataset") throw io::FormatError(path.string() + ": not a dataset file");
        if (h.value("version", -1) != kDatasetVersion)
            throw io::FormatError(path.string() + ": unsupported dataset version " + h.value("version", io::json()).dump());
        count_ = h.at("count").get<std::size_t>();
        size_ = h.at("image_size").get<int>();
        if (h.at("samples").size() != count_)
            throw io::FormatError(path.string() + ": header count " + std::to_string(count_) + " does not match " +
                                  std::to_string(h.at("samples").size()) + " sample records");
        const std::uint64_t expect = count_ * block_bytes();
        if (in_.payload_bytes() != expect)
            throw io::FormatError(path.string() + ": payload holds " + std::to_string(in_.payload_bytes()) +
                                  " bytes, header promises " + std::to_string(expect) + " (truncated or count mismatch)");
    }

    std::size_t size() const { return count_; }
    int image_size() const { return size_; }
    const io::json& header() const { return in_.header(); }
    const std::filesystem::path& path() const { return path_; }

    const io::json& meta(std::size_t i) const { return in_.header().at("samples").at(i); }

    std::vector<Box> boxes(std::size_t i) const {
        std::vector<Box> out;
        for (const auto& b : meta(i).at("boxes")) out.push_back(detail::box_from_json(b));
        return out;
    }

    /// Image only, without masks.
    std::vector<float> image(std::size_t i) {
        check(i);
        return in_.read_at<float>(i * block_bytes(), image_values());
    }

    MultiphaseSample read(std::size_t i) {
        check(i);
        MultiphaseSample s;
        const auto& m = meta(i);
        s.size = size_;
        s.seed = m.at("seed").get<std::uint64_t>();
        s.gt_boxes = boxes(i);
        s.annotation_phase = m.at("annotation_phase").get<int>();
        s.misalignment = misalignment_from_json(m.at("misalignment"));
        for (std::size_t p = 0; p < kPhases; ++p) s.warps[p] = warp_from_json(m.at("warps").at(p));
        const std::uint64_t base = i * block_bytes();
        s.image = in_.read_at<float>(base, image_values());
        const std::size_t plane = static_cast<std::size_t>(size_) * size_;
        auto lesion = in_.read_at<std::uint8_t>(base + image_values() * sizeof(float), kPhases * plane);
        auto liver = in_.read_at<std::uint8_t>(base + image_values() * sizeof(float) + kPhases * plane, kPhases * plane);
        for (std::size_t p = 0; p < kPhases; ++p) {
            s.lesion_mask[p] = Mask(size_, size_);
            s.liver_mask[p] = Mask(size_, size_);
            std::copy_n(lesion.begin() + static_cast<std::ptrdiff_t>(p * plane), plane, s.lesion_mask[p].bits.begin());
            std::copy_n(liver.begin() + static_cast<std::ptrdiff_t>(p * plane), plane, s.liver_mask[p].bits.begin());
        }
        return s;
    }

    std::vector<MultiphaseSample> read_all() {
        std::vector<MultiphaseSample> out;
        for (std::size_t i = 0; i < count_; ++i) out.push_back(read(i));
        return out;
    }

   private:
    std::size_t image_values() const { return static_cast<std::size_t>(kPhases * kSlices) * size_ * size_; }
    std::uint64_t block_bytes() const {
        return image_values() * sizeof(float) + 2 * static_cast<std::uint64_t>(kPhases) * size_ * size_;
    }
    void check(std::size_t i) const {
        if (i >= count_)
            throw std::out_of_range("sample index " + std::to_string(i) + " out of range for " + std::to_string(count_) +
                                    " samples");
    }

    std::filesystem::path path_;
    mutable io::FramedReader in_;
    std::size_t count_ = 0;
    int size_ = 0;
};

/// Per-channel float32 planes for external viewers: one JSON header line then
/// channel-major raw data.
inline void export_raw(const std::filesystem::path& path, const MultiphaseSample& s) {
    io::json header{{"format", "phasealign-raw"},
                    {"dtype", "float32"},
                    {"shape", {kPhases * kSlices, s.size, s.size}},
                    {"channels", io::json::array()}};
    for (int p = 0; p < kPhases; ++p)
        for (int sl = 0; sl < kSlices; ++sl)
            header["channels"].push_back(std::string(kPhaseNames[static_cast<std::size_t>(p)]) + "/" + std::to_string(sl));
    io::FramedWriter out(path, header);
    out.write(s.image);
    out.close();
}

}  // namespace phasealign::data
