#pragma once

#include <filesystem>
#include <fstream>

#include "phasealign/detector/train.hpp"
#include "phasealign/eval/report.hpp"

namespace phasealign::cli {

inline constexpr const char* kToolVersion = "0.1.0";

/// Invalid or unreadable configuration. Maps to exit code 2.
class ConfigError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct DatasetConfig {
    int count = 500;
    std::array<double, 3> split{0.77, 0.19, 0.04};
    double tier_px = 0;  // misalignment tier; ignored when `misalignment` is set explicitly
    std::optional<data::MisalignmentSpec> misalignment;

    data::MisalignmentSpec resolved_misalignment() const {
        return misalignment ? *misalignment : data::MisalignmentSpec::tier(tier_px);
    }
};

struct EvalConfig {
    double score_threshold = 0.2;
    double nms_iou = 0.45;
    bool iobb_over_gt = false;

    DecodeConfig decode() const { return {score_threshold, nms_iou, 100}; }
    IobbDenominator denominator() const {
        return iobb_over_gt ? IobbDenominator::ground_truth : IobbDenominator::predicted;
    }
};

struct RobustnessTier {
    std::string name;
    double px = 0;
    std::filesystem::path data;  // directory written by `generate`
};

struct RobustnessConfig {
    std::vector<RobustnessTier> tiers;
    bool include_test = true;  // average over test metrics too when a test split exists
};

struct RunConfig {
    std::uint64_t seed = 1;
    data::PhantomSpec phantom;
    DatasetConfig dataset;
    nn::ModelConfig model;
    TrainConfig train;
    EvalConfig eval;
    RobustnessConfig robustness;
};

namespace detail {

using json = io::json;

inline void check_keys(const json& j, const std::set<std::string>& known, const std::string& where) {
    try {
        data::detail::reject_unknown_keys(j, known, where);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

template <typename F>
void get(const json& j, const char* key, F& field) {
    if (j.contains(key)) j.at(key).get_to(field);
}

inline json model_json(const nn::ModelConfig& m) {
    json anchors = json::array();
    for (const auto& s : m.anchors.sources) anchors.push_back({{"stride", s.stride}, {"sizes", s.sizes}, {"ratios", s.ratios}});
    return {{"image_size", m.image_size},
            {"slices", m.slices},
            {"pool", m.pool},
            {"no_sa", m.no_sa},
            {"no_dc", m.no_dc},
            {"global_offsets", m.global_offsets},
            {"no_interphase_attention", m.no_interphase_attention},
            {"portal_only", m.portal_only},
            {"anchors", anchors}};
}

inline nn::ModelConfig model_from_json(const json& j) {
    check_keys(j, {"image_size", "slices", "pool", "no_sa", "no_dc", "global_offsets", "no_interphase_attention",
                   "portal_only", "anchors"},
               "model");
    nn::ModelConfig m;
    get(j, "image_size", m.image_size);
    get(j, "slices", m.slices);
    get(j, "pool", m.pool);
    get(j, "no_sa", m.no_sa);
    get(j, "no_dc", m.no_dc);
    get(j, "global_offsets", m.global_offsets);
    get(j, "no_interphase_attention", m.no_interphase_attention);
    get(j, "portal_only", m.portal_only);
    if (j.contains("anchors")) {
        m.anchors.sources.clear();
        for (const auto& a : j.at("anchors")) {
            check_keys(a, {"stride", "sizes", "ratios"}, "model.anchors");
            AnchorSource s;
            get(a, "stride", s.stride);
            get(a, "sizes", s.sizes);
            get(a, "ratios", s.ratios);
            m.anchors.sources.push_back(s);
        }
    }
    if (m.slices != data::kSlices) throw ConfigError("model.slices must be " + std::to_string(data::kSlices));
    if (m.pool < 1) throw ConfigError("model.pool must be at least 1");
    if (m.anchors.sources.size() != 2) throw ConfigError("model.anchors needs exactly two sources (strides 4 and 8)");
    return m;
}

inline json train_json(const TrainConfig& t) {
    return {{"iterations", t.iterations},
            {"batch", t.batch},
            {"lr", t.lr},
            {"momentum", t.momentum},
            {"weight_decay", t.weight_decay},
            {"decay_steps", t.decay_steps},
            {"decay_factor", t.decay_factor},
            {"log_every", t.log_every},
            {"checkpoint_every", t.checkpoint_every},
            {"augment", t.augment},
            {"mirror_prob", t.mirror_prob},
            {"contrast_jitter", t.contrast_jitter},
            {"brightness_jitter", t.brightness_jitter},
            {"neg_ratio", t.neg_ratio},
            {"pos_iou", t.pos_iou},
            {"neg_iou", t.neg_iou}};
}

inline TrainConfig train_from_json(const json& j) {
    TrainConfig t;
    const auto defaults = train_json(t);
    std::set<std::string> keys;
    for (const auto& [k, v] : defaults.items()) keys.insert(k);
    check_keys(j, keys, "train");
    get(j, "iterations", t.iterations);
    get(j, "batch", t.batch);
    get(j, "lr", t.lr);
    get(j, "momentum", t.momentum);
    get(j, "weight_decay", t.weight_decay);
    get(j, "decay_steps", t.decay_steps);
    get(j, "decay_factor", t.decay_factor);
    get(j, "log_every", t.log_every);
    get(j, "checkpoint_every", t.checkpoint_every);
    get(j, "augment", t.augment);
    get(j, "mirror_prob", t.mirror_prob);
    get(j, "contrast_jitter", t.contrast_jitter);
    get(j, "brightness_jitter", t.brightness_jitter);
    get(j, "neg_ratio", t.neg_ratio);
    get(j, "pos_iou", t.pos_iou);
    get(j, "neg_iou", t.neg_iou);
    try {
        t.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return t;
}

}  // namespace detail

inline io::json to_json(const RunConfig& c) {
    using detail::json;
    json dataset{{"count", c.dataset.count}, {"split", c.dataset.split}, {"tier_px", c.dataset.tier_px}};
    if (c.dataset.misalignment) dataset["misalignment"] = data::to_json(*c.dataset.misalignment);
    json tiers = json::array();
    for (const auto& t : c.robustness.tiers) tiers.push_back({{"name", t.name}, {"px", t.px}, {"data", t.data.string()}});
    return {{"seed", c.seed},
            {"phantom", data::to_json(c.phantom)},
            {"dataset", dataset},
            {"model", detail::model_json(c.model)},
            {"train", detail::train_json(c.train)},
            {"eval",
             {{"score_threshold", c.eval.score_threshold},
              {"nms_iou", c.eval.nms_iou},
              {"iobb_over_gt", c.eval.iobb_over_gt}}},
            {"robustness", {{"tiers", tiers}, {"include_test", c.robustness.include_test}}}};
}

/// Missing sections keep defaults; unknown keys anywhere are a ConfigError.
inline RunConfig run_config_from_json(const io::json& j) {
    using detail::get;
    RunConfig c;
    try {
        detail::check_keys(j, {"seed", "phantom", "dataset", "model", "train", "eval", "robustness"}, "config");
        get(j, "seed", c.seed);
        if (j.contains("phantom")) c.phantom = data::phantom_spec_from_json(j.at("phantom"));
        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            detail::check_keys(d, {"count", "split", "tier_px", "misalignment"}, "dataset");
            get(d, "count", c.dataset.count);
            get(d, "split", c.dataset.split);
            get(d, "tier_px", c.dataset.tier_px);
            if (d.contains("misalignment")) c.dataset.misalignment = data::misalignment_from_json(d.at("misalignment"));
        }
        if (j.contains("model")) c.model = detail::model_from_json(j.at("model"));
        if (j.contains("train")) c.train = detail::train_from_json(j.at("train"));
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            detail::check_keys(e, {"score_threshold", "nms_iou", "iobb_over_gt"}, "eval");
            get(e, "score_threshold", c.eval.score_threshold);
            get(e, "nms_iou", c.eval.nms_iou);
            get(e, "iobb_over_gt", c.eval.iobb_over_gt);
        }
        if (j.contains("robustness")) {
            const auto& r = j.at("robustness");
            detail::check_keys(r, {"tiers", "include_test"}, "robustness");
            get(r, "include_test", c.robustness.include_test);
            if (r.contains("tiers"))
                for (const auto& t : r.at("tiers")) {
                    detail::check_keys(t, {"name", "px", "data"}, "robustness.tiers");
                    RobustnessTier tier;
                    get(t, "px", tier.px);
                    tier.name = t.value("name", std::to_string(static_cast<int>(tier.px)) + "px");
                    tier.data = t.at("data").get<std::string>();
                    c.robustness.tiers.push_back(tier);
                }
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
    if (c.dataset.count < 1) throw ConfigError("dataset.count must be positive");
    for (double s : c.dataset.split)
        if (s < 0) throw ConfigError("dataset.split entries must be non-negative");
    if (std::abs(c.dataset.split[0] + c.dataset.split[1] + c.dataset.split[2] - 1) > 1e-9)
        throw ConfigError("dataset.split must sum to 1");
    if (c.dataset.tier_px < 0) throw ConfigError("dataset.tier_px must be non-negative");
    if (c.model.image_size != c.phantom.image_size) throw ConfigError("model.image_size differs from phantom.image_size");
    if (!(c.eval.score_threshold >= 0 && c.eval.score_threshold <= 1) || !(c.eval.nms_iou > 0))
        throw ConfigError("eval thresholds out of range");
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    io::json j;
    try {
        j = io::json::parse(in);
    } catch (const io::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

/// Split sizes: train and validation rounded to nearest, test takes the remainder.
inline std::array<int, 3> split_counts(int count, const std::array<double, 3>& split) {
    const int train = static_cast<int>(std::lround(split[0] * count));
    const int val = std::min(count - train, static_cast<int>(std::lround(split[1] * count)));
    return {train, val, count - train - val};
}

}  // namespace phasealign::cli
