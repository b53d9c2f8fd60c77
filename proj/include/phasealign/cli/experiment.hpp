#pragma once

#include "phasealign/cli/config.hpp"

namespace phasealign::cli {

inline constexpr std::array<const char*, 3> kSplitNames{"train", "val", "test"};

/// Sample i of a run: the scene depends on (seed, i) only, so datasets that differ only in
/// misalignment tier show the same anatomy.
inline data::MultiphaseSample make_sample(const RunConfig& cfg, const data::MisalignmentSpec& mis, int index) {
    auto m = mis;
    m.seed = mix_seed(cfg.seed, 0x7465697200ULL);
    return data::generate_sample(cfg.phantom, m, mix_seed(cfg.seed, static_cast<std::uint64_t>(index)));
}

inline std::array<std::vector<data::MultiphaseSample>, 3> generate_splits(const RunConfig& cfg,
                                                                          const data::MisalignmentSpec& mis) {
    const auto counts = split_counts(cfg.dataset.count, cfg.dataset.split);
    std::array<std::vector<data::MultiphaseSample>, 3> out;
    int index = 0;
    for (std::size_t s = 0; s < 3; ++s)
        for (int k = 0; k < counts[s]; ++k) out[s].push_back(make_sample(cfg, mis, index++));
    return out;
}

inline std::array<std::vector<data::MultiphaseSample>, 3> generate_splits(const RunConfig& cfg) {
    return generate_splits(cfg, cfg.dataset.resolved_misalignment());
}

inline std::vector<std::vector<Box>> ground_truth(const std::vector<Example>& ex) {
    std::vector<std::vector<Box>> g;
    for (const auto& e : ex) g.push_back(e.boxes);
    return g;
}

inline nn::Detector<float> make_model(const RunConfig& cfg) {
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x6d6f64656cULL));
    return nn::Detector<float>(cfg.model, rng);
}

inline TrainConfig resolved_train(const RunConfig& cfg) {
    auto t = cfg.train;
    t.seed = cfg.seed;
    return t;
}

inline eval::EvalReport evaluate_model(const nn::Detector<float>& model, const std::vector<Example>& ex,
                                       const EvalConfig& ecfg) {
    return eval::evaluate(predict(model, ex, ecfg.decode()), ground_truth(ex), ecfg.denominator());
}

struct TierOutcome {
    TrainResult training;
    eval::EvalReport val;
    std::optional<eval::EvalReport> test;
};

/// Trains one model from scratch on `train` and evaluates it on the held-out splits.
inline TierOutcome train_and_evaluate(const RunConfig& cfg, const std::vector<Example>& train_set,
                                      const std::vector<Example>& val, const std::vector<Example>& test,
                                      const TrainHooks& hooks = {}) {
    auto model = make_model(cfg);
    TierOutcome out;
    out.training = train(model, train_set, resolved_train(cfg), hooks);
    out.val = evaluate_model(model, val, cfg.eval);
    if (!test.empty()) out.test = evaluate_model(model, test, cfg.eval);
    return out;
}

/// Sensitivity of `unregistered` against the tier-0 outcome over validation metrics, plus
/// test metrics when both sides have them and `include_test` is set.
inline eval::SensitivityReport tier_sensitivity(const std::string& tier, const TierOutcome& unregistered,
                                                const TierOutcome& registered, bool include_test) {
    std::vector<eval::EvalReport> u{unregistered.val}, r{registered.val};
    std::vector<std::string> prefixes{"val."};
    if (include_test && unregistered.test && registered.test) {
        u.push_back(*unregistered.test);
        r.push_back(*registered.test);
        prefixes.push_back("test.");
    }
    return eval::sensitivity_report(tier, u, r, prefixes);
}

}  // namespace phasealign::cli
