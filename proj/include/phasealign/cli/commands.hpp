#pragma once

#include <iostream>

#include "phasealign/cli/experiment.hpp"
#include "phasealign/cli/gradcheck_suite.hpp"

namespace phasealign::cli {

namespace fs = std::filesystem;

/// Output directory exists and is not empty without --force. Exit code 1.
class OutputExists : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

inline std::string dataset_file(const std::string& split) { return split + ".dataset"; }

/// Creates `out`; an existing non-empty directory is cleared only with `force`.
inline void prepare_output(const fs::path& out, bool force) {
    if (fs::exists(out) && !fs::is_directory(out)) throw OutputExists(out.string() + " exists and is not a directory");
    if (fs::exists(out) && !fs::is_empty(out)) {
        if (!force) throw OutputExists(out.string() + " is not empty (pass --force to overwrite)");
        for (const auto& e : fs::directory_iterator(out)) fs::remove_all(e.path());
    }
    fs::create_directories(out);
}

inline void write_json(const fs::path& path, const io::json& j) { io::write_text(path, j.dump(2) + "\n"); }

/// Resolved config and a manifest naming the tool version and the digests of every input
/// and output file.
inline void write_run_metadata(const fs::path& out, const std::string& command, const RunConfig& cfg,
                               const std::vector<fs::path>& inputs, const std::vector<std::string>& outputs) {
    write_json(out / "config.resolved.json", to_json(cfg));
    io::json manifest{{"tool", "phasealign"}, {"version", kToolVersion}, {"command", command}};
    manifest["inputs"] = io::json::object();
    for (const auto& p : inputs) manifest["inputs"][p.filename().string()] = {{"path", p.string()}, {"digest", io::file_digest(p)}};
    manifest["outputs"] = io::json::object();
    for (const auto& name : outputs) manifest["outputs"][name] = io::file_digest(out / name);
    write_json(out / "manifest.json", manifest);
}

// ---------------------------------------------------------------- generate

inline void cmd_generate(const RunConfig& cfg, const fs::path& out, bool force) {
    prepare_output(out, force);
    const auto mis = cfg.dataset.resolved_misalignment();
    const auto splits = generate_splits(cfg, mis);
    std::vector<std::string> outputs;
    io::json summary = io::json::object();
    for (std::size_t s = 0; s < 3; ++s) {
        const std::string name = kSplitNames[s];
        io::json extra{{"split", name}, {"seed", cfg.seed}, {"phantom", data::to_json(cfg.phantom)},
                       {"misalignment", data::to_json(mis)}};
        data::write_dataset(out / dataset_file(name), splits[s], extra);
        outputs.push_back(dataset_file(name));
        const auto level = eval::mismatch_level(splits[s]);
        summary[name] = {{"count", splits[s].size()}, {"mismatch_dice", eval::detail::optional_json(level)}};
    }
    write_json(out / "summary.json", summary);
    outputs.push_back("summary.json");
    write_run_metadata(out, "generate", cfg, {}, outputs);
    std::cout << "generated " << splits[0].size() << "/" << splits[1].size() << "/" << splits[2].size()
              << " samples (train/val/test) in " << out.string() << "\n";
}

// ---------------------------------------------------------------- train

inline std::vector<Example> load_split(const fs::path& data_dir, const std::string& split) {
    const auto path = data_dir / dataset_file(split);
    if (!fs::exists(path)) throw std::runtime_error("missing dataset split " + path.string());
    data::DatasetReader reader(path);
    return load_examples(reader);
}

inline void cmd_train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out, bool force) {
    prepare_output(out, force);
    const auto examples = load_split(data_dir, "train");
    auto model = make_model(cfg);
    TrainHooks hooks{out, [](const LogRow& r) {
                         std::cout << "step " << r.step << " cls " << r.loss_cls << " reg " << r.loss_reg << " lr "
                                   << r.lr << "\n";
                     }};
    const auto res = train(model, examples, resolved_train(cfg), hooks);
    io::write_text(out / "train_log.csv", format_log(res.log));
    std::vector<std::string> outputs{"train_log.csv", "model.ckpt"};
    for (const auto& e : fs::directory_iterator(out))
        if (e.path().extension() == ".ckpt" && e.path().filename() != "model.ckpt")
            outputs.push_back(e.path().filename().string());
    std::sort(outputs.begin() + 2, outputs.end());
    write_run_metadata(out, "train", cfg, {data_dir / dataset_file("train")}, outputs);
    std::cout << "trained " << res.steps << " steps in " << res.seconds << " s\n";
}

// ---------------------------------------------------------------- eval

inline eval::EvalReport evaluate_split(const RunConfig& cfg, const nn::Detector<float>& model, const fs::path& data_dir,
                                       const std::string& split) {
    const auto path = data_dir / dataset_file(split);
    if (!fs::exists(path)) throw std::runtime_error("missing dataset split " + path.string());
    data::DatasetReader reader(path);
    const auto samples = reader.read_all();
    auto report = evaluate_model(model, to_examples(samples), cfg.eval);
    report.mismatch_dice = eval::mismatch_level(samples);
    return report;
}

inline void write_eval_outputs(const fs::path& out, const std::string& stem, const eval::EvalReport& r,
                               std::vector<std::string>& outputs) {
    write_json(out / (stem + ".json"), eval::to_json(r));
    io::write_text(out / (stem + ".csv"), eval::to_csv(r));
    outputs.push_back(stem + ".json");
    outputs.push_back(stem + ".csv");
    for (const auto& [k, curve] : r.curves) {
        const auto name = stem + "_pr_" + k + ".csv";
        io::write_text(out / name, eval::pr_curve_csv(curve));
        outputs.push_back(name);
    }
}

inline void cmd_eval(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data_dir, const std::string& split,
                     const fs::path& out, bool force) {
    auto model = make_model(cfg);
    read_checkpoint(checkpoint, model.params());
    prepare_output(out, force);
    auto report = evaluate_split(cfg, model, data_dir, split);
    report.context = {{"split", split}, {"checkpoint_digest", io::file_digest(checkpoint)}};
    std::vector<std::string> outputs;
    write_eval_outputs(out, "report", report, outputs);
    write_run_metadata(out, "eval", cfg, {checkpoint, data_dir / dataset_file(split)}, outputs);
    for (const auto& [k, v] : report.ap) std::cout << k << " " << (v ? std::to_string(*v) : "n/a") << "\n";
}

// ---------------------------------------------------------------- robustness

inline void cmd_robustness(const RunConfig& cfg, const fs::path& out, bool force) {
    const auto& tiers = cfg.robustness.tiers;
    auto base = std::find_if(tiers.begin(), tiers.end(), [](const RobustnessTier& t) { return t.px == 0; });
    if (base == tiers.end()) throw ConfigError("robustness plan has no tier 0 (registered) dataset");
    std::set<std::string> names;
    for (const auto& t : tiers)
        if (!names.insert(t.name).second) throw ConfigError("duplicate robustness tier name " + t.name);
    for (const auto& t : tiers)
        for (const char* s : {"train", "val"})
            if (!fs::exists(t.data / dataset_file(s)))
                throw std::runtime_error("robustness tier " + t.name + ": missing " + (t.data / dataset_file(s)).string());
    prepare_output(out, force);

    std::map<std::string, TierOutcome> outcomes;
    std::vector<fs::path> inputs;
    std::vector<std::string> outputs;
    for (const auto& t : tiers) {
        const auto dir = out / t.name;
        fs::create_directories(dir);
        std::vector<Example> test;
        if (fs::exists(t.data / dataset_file("test"))) {
            test = load_split(t.data, "test");
            inputs.push_back(t.data / dataset_file("test"));
        }
        inputs.push_back(t.data / dataset_file("train"));
        inputs.push_back(t.data / dataset_file("val"));
        std::cout << "tier " << t.name << ": training\n";
        auto outcome = train_and_evaluate(cfg, load_split(t.data, "train"), load_split(t.data, "val"), test, {dir});
        io::write_text(dir / "train_log.csv", format_log(outcome.training.log));
        std::vector<std::string> tier_outputs;
        write_eval_outputs(dir, "val", outcome.val, tier_outputs);
        if (outcome.test) write_eval_outputs(dir, "test", *outcome.test, tier_outputs);
        for (const auto& name : tier_outputs) outputs.push_back(t.name + "/" + name);
        outputs.push_back(t.name + "/train_log.csv");
        outputs.push_back(t.name + "/model.ckpt");
        outcomes.emplace(t.name, std::move(outcome));
    }

    std::vector<eval::SensitivityReport> reports;
    io::json j = io::json::array();
    for (const auto& t : tiers) {
        reports.push_back(tier_sensitivity(t.name, outcomes.at(t.name), outcomes.at(base->name), cfg.robustness.include_test));
        j.push_back(eval::to_json(reports.back()));
        std::cout << "tier " << t.name << " average sensitivity "
                  << (reports.back().average ? std::to_string(*reports.back().average) : "n/a") << "\n";
    }
    write_json(out / "sensitivity.json", j);
    io::write_text(out / "sensitivity.csv", eval::to_csv(reports));
    outputs.push_back("sensitivity.json");
    outputs.push_back("sensitivity.csv");
    write_run_metadata(out, "robustness", cfg, inputs, outputs);
}

// ---------------------------------------------------------------- gradcheck

inline bool cmd_gradcheck(const fs::path& out, bool force) {
    const auto table = run_gradcheck_suite();
    const auto csv = to_csv(table);
    std::cout << csv << "max relative error " << table.max_error() << ", " << table.seconds << " s: "
              << (table.passed() ? "PASS" : "FAIL") << "\n";
    if (!out.empty()) {
        prepare_output(out, force);
        io::write_text(out / "gradcheck.csv", csv);
        io::json j = io::json::array();
        for (const auto& r : table.rows)
            j.push_back({{"op", r.name}, {"max_rel_error", r.max_rel_error}, {"checked", r.checked}, {"passed", r.passed}});
        write_json(out / "gradcheck.json", {{"tolerance", kGradcheckTolerance}, {"passed", table.passed()}, {"ops", j}});
        io::json manifest{{"tool", "phasealign"}, {"version", kToolVersion}, {"command", "gradcheck"}};
        write_json(out / "manifest.json", manifest);
    }
    return table.passed();
}

// ---------------------------------------------------------------- export-maps

/// Mean displacement length per phase group of one sample's offset field
/// [2*K*G, H, W]; one entry when offsets are shared.
inline std::vector<double> mean_offset_per_group(const float* off, int groups, int taps, std::size_t plane) {
    std::vector<double> out(static_cast<std::size_t>(groups), 0.0);
    for (int g = 0; g < groups; ++g) {
        double s = 0;
        for (int t = 0; t < taps; ++t) {
            const float* dy = off + static_cast<std::size_t>(2 * (g * taps + t)) * plane;
            const float* dx = dy + plane;
            for (std::size_t i = 0; i < plane; ++i) s += std::hypot(static_cast<double>(dy[i]), static_cast<double>(dx[i]));
        }
        out[static_cast<std::size_t>(g)] = s / (static_cast<double>(taps) * static_cast<double>(plane));
    }
    return out;
}

inline void cmd_export_maps(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data_dir,
                            const std::string& split, int n, const fs::path& out, bool force) {
    auto model = make_model(cfg);
    read_checkpoint(checkpoint, model.params());
    const auto path = data_dir / dataset_file(split);
    if (!fs::exists(path)) throw std::runtime_error("missing dataset split " + path.string());
    data::DatasetReader reader(path);
    if (n < 0 || static_cast<std::size_t>(n) > reader.size())
        throw ConfigError("export-maps: n=" + std::to_string(n) + " exceeds the " + std::to_string(reader.size()) +
                          " samples of the " + split + " split");
    prepare_output(out, force);

    NoGradGuard guard;
    std::vector<std::vector<float>> gates, offsets;
    Shape gate_shape, offset_shape;
    std::ostringstream csv;
    csv << "sample,group,mean_abs_offset\n" << std::setprecision(9);
    for (int i = 0; i < n; ++i) {
        Example ex{reader.image(static_cast<std::size_t>(i)), {}};
        const auto res = model.forward(make_batch({&ex}, cfg.model));
        if (!res.attention.empty()) {
            const auto& g = res.attention.front().gated;
            gate_shape = Shape(g.shape().begin() + 1, g.shape().end());
            gates.push_back(g.vec());
        }
        if (res.offsets.defined()) {
            const auto& o = res.offsets;
            offset_shape = Shape(o.shape().begin() + 1, o.shape().end());
            offsets.push_back(o.vec());
            const int taps = 9;
            const int groups = static_cast<int>(o.dim(1)) / (2 * taps);
            const auto means = mean_offset_per_group(o.vec().data(), groups, taps, static_cast<std::size_t>(o.dim(2) * o.dim(3)));
            for (std::size_t gi = 0; gi < means.size(); ++gi)
                csv << i << ',' << (groups == 1 ? "shared" : data::kPhaseNames[gi]) << ',' << means[gi] << '\n';
        }
    }
    io::json header{{"format", "phasealign-maps"},
                    {"version", 1},
                    {"count", n},
                    {"split", split},
                    {"gate_shape", gate_shape},
                    {"offset_shape", offset_shape},
                    {"has_gate", !gates.empty()},
                    {"has_offsets", !offsets.empty()},
                    {"layout", "per sample: gate (sigma * projected gate) float32, then offsets float32"}};
    io::FramedWriter w(out / "maps.bin", header);
    for (int i = 0; i < n; ++i) {
        if (!gates.empty()) w.write(gates[static_cast<std::size_t>(i)]);
        if (!offsets.empty()) w.write(offsets[static_cast<std::size_t>(i)]);
    }
    w.close();
    io::write_text(out / "offsets.csv", csv.str());
    write_run_metadata(out, "export-maps", cfg, {checkpoint, path}, {"maps.bin", "offsets.csv"});
    std::cout << "exported maps for " << n << " samples to " << out.string() << "\n";
}

}  // namespace phasealign::cli
