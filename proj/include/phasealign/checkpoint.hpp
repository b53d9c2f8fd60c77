#pragma once

#include "phasealign/io.hpp"
#include "phasealign/optim.hpp"

namespace phasealign {

inline constexpr int kCheckpointVersion = 1;

struct CheckpointInfo {
    std::int64_t step = 0;
    io::json extra;
};

/// Header: {format, version, step, params:[{name, shape, lr_scale}], sigma:{name: value},
/// has_momentum, extra}. Payload: float32 parameter blocks in header order, then the
/// momentum buffers in the same order.
template <typename T>
void write_checkpoint(const std::filesystem::path& path, const ParameterStore<T>& store, std::int64_t step,
                      const io::json& extra = io::json::object()) {
    io::json header;
    header["format"] = "phasealign-checkpoint";
    header["version"] = kCheckpointVersion;
    header["step"] = step;
    header["has_momentum"] = true;
    header["params"] = io::json::array();
    header["sigma"] = io::json::object();
    for (const auto& p : store.all()) {
        header["params"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"lr_scale", static_cast<double>(p.lr_scale)}});
        if (p.name.size() >= 6 && p.name.compare(p.name.size() - 6, 6, ".sigma") == 0)
            header["sigma"][p.name] = static_cast<double>(p.tensor.vec()[0]);
    }
    header["extra"] = extra;
    io::FramedWriter out(path, header);
    for (const auto& p : store.all()) out.write(std::vector<float>(p.tensor.vec().begin(), p.tensor.vec().end()));
    for (const auto& p : store.all()) out.write(std::vector<float>(p.momentum.begin(), p.momentum.end()));
    out.close();
}

inline io::json read_checkpoint_header(const std::filesystem::path& path) {
    io::FramedReader in(path);
    return in.header();
}

/// Loads values into an existing store. Names and shapes must match exactly.
template <typename T>
CheckpointInfo read_checkpoint(const std::filesystem::path& path, ParameterStore<T>& store) {
    io::FramedReader in(path);
    const auto& h = in.header();
    if (h.value("format", "") != "phasealign-checkpoint")
        throw io::FormatError(path.string() + ": not a checkpoint file");
    if (h.value("version", -1) != kCheckpointVersion)
        throw io::FormatError(path.string() + ": unsupported checkpoint version " + h.value("version", io::json()).dump());
    const auto& entries = h.at("params");
    if (entries.size() != store.size())
        throw io::FormatError("topology mismatch: checkpoint has " + std::to_string(entries.size()) +
                              " parameters, model has " + std::to_string(store.size()));
    std::uint64_t pos = 0;
    std::vector<std::pair<Parameter<T>*, std::size_t>> order;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto name = entries[i].at("name").get<std::string>();
        const auto shape = entries[i].at("shape").get<Shape>();
        if (!store.contains(name)) throw io::FormatError("topology mismatch: model has no parameter " + name);
        auto& p = store.at(name);
        if (p.tensor.shape() != shape)
            throw io::FormatError("topology mismatch: " + name + " has shape " + to_string(p.tensor.shape()) +
                                  " in the model but " + to_string(shape) + " in the checkpoint");
        order.emplace_back(&p, static_cast<std::size_t>(numel(shape)));
    }
    for (auto& [p, count] : order) {
        auto values = in.read_at<float>(pos, count);
        pos += count * sizeof(float);
        std::copy(values.begin(), values.end(), p->tensor.data().begin());
    }
    if (h.value("has_momentum", false))
        for (auto& [p, count] : order) {
            auto values = in.read_at<float>(pos, count);
            pos += count * sizeof(float);
            std::copy(values.begin(), values.end(), p->momentum.begin());
        }
    if (pos != in.payload_bytes()) throw io::FormatError(path.string() + ": trailing bytes after parameter blocks");
    return {h.value("step", std::int64_t{0}), h.value("extra", io::json::object())};
}

}  // namespace phasealign
