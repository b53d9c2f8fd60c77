// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only when all pass.
// `acceptance 1 2 5` runs a subset.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <set>

#include "oracles.hpp"
#include "phasealign/cli/commands.hpp"
#include "phasealign/cli/gradcheck_suite.hpp"

using namespace phasealign;
namespace fs = std::filesystem;
using TF = Tensor<float>;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
    bool pass;
    std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 6) {
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
    double m = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

Verdict gradient_correctness() {
    const auto table = cli::run_gradcheck_suite();
    const bool ok = table.passed() && table.max_error() < 1e-4 && table.seconds < 120;
    return {ok, std::to_string(table.rows.size()) + " cases, max rel err " + fmt(table.max_error(), 3) + ", " +
                    fmt(table.seconds, 3) + " s"};
}

Verdict identity_at_init() {
    std::mt19937_64 rng(11);
    nn::Detector<float> model({}, rng);
    double worst = 0;
    for (int i = 0; i < 10; ++i) {
        auto x = TF::uniform({1, 12, 96, 96}, 0, 1, rng);
        auto full = model.forward(x);
        auto base = model.forward(x, {.bypass_attention = true, .regular_dc = true});
        worst = std::max({worst, max_abs_diff(full.logits, base.logits), max_abs_diff(full.regressions, base.regressions)});
    }
    return {worst < 1e-5, "max |full - baseline| " + fmt(worst, 3) + " over 10 inputs"};
}

Verdict deformable_reduction() {
    double worst = 0;
    for (std::uint64_t draw = 0; draw < 20; ++draw) {
        std::mt19937_64 rng(100 + draw);
        ParameterStore<float> store;
        nn::PhasewiseDeformConv<float> dc(store, "dc", {8, 12, 8, 4, false, 3}, rng);
        for (auto& b : dc.bias().vec()) b = std::uniform_real_distribution<float>(-1, 1)(rng);
        auto x = TF::randn({2, 8, 7, 6}, rng);
        auto guided = TF::randn({2, 16, 7, 6}, rng);
        auto y = dc.forward(x, guided).y;
        auto regular = conv2d(x, dc.weight(), dc.bias(), {.padding = 1, .groups = 4});
        worst = std::max(worst, max_abs_diff(y, regular));
    }
    return {worst < 1e-5, "max |dconv - grouped conv| " + fmt(worst, 3) + " over 20 draws"};
}

Verdict attention_normalization() {
    double worst = 0;
    for (int pool : {1, 2, 4, 8}) {
        std::mt19937_64 rng(pool * 31);
        ParameterStore<float> store;
        nn::SelfAttention<float> sa(store, "sa", nn::AttentionConfig::standard(16, pool), rng);
        store["sa.sigma"].vec()[0] = 0.5f;
        auto beta = sa.forward(TF::randn({2, 16, 16, 16}, rng)).state.beta;
        const auto M = beta.dim(2);
        for (std::int64_t r = 0; r < beta.dim(0) * beta.dim(1); ++r) {
            double s = 0;
            for (std::int64_t i = 0; i < M; ++i) s += beta.vec()[r * M + i];
            worst = std::max(worst, std::abs(s - 1));
        }
    }
    return {worst < 1e-5, "max |row sum - 1| " + fmt(worst, 3) + " for D in {1,2,4,8}"};
}

Verdict ap_oracle() {
    using eval::iobb_overlap;
    using eval::iou_overlap;
    auto c = [](double x0, double y0, double x1, double y1) { return Box::from_corners(x0, y0, x1, y1); };
    const bool hand = iou(c(0, 0, 10, 10), c(0, 0, 10, 10)) == 1.0 &&
                      iou(c(0, 0, 10, 10), c(20, 20, 30, 30)) == 0.0 &&
                      iou(c(0, 0, 10, 10), c(5, 0, 15, 10)) == 1.0 / 3.0 &&
                      iobb(c(0, 0, 10, 10), c(5, 0, 15, 10)) == 0.5 &&
                      iobb(c(2, 2, 8, 8), c(0, 0, 10, 10)) == 1.0;

    std::mt19937_64 rng(77);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int images = std::uniform_int_distribution<int>(1, 20)(rng);
        std::uniform_int_distribution<int> count(0, 10), level(1, 8);
        std::uniform_real_distribution<double> pos(0, 40), size(4, 16), jitter(-4, 4);
        std::vector<std::vector<Box>> preds(static_cast<std::size_t>(images)), gts(static_cast<std::size_t>(images));
        for (int i = 0; i < images; ++i) {
            const int ng = count(rng), np = count(rng);
            for (int k = 0; k < ng; ++k) {
                const double x = pos(rng), y = pos(rng);
                gts[i].push_back(c(x, y, x + size(rng), y + size(rng)));
            }
            for (int k = 0; k < np; ++k) {
                Box p;
                if (!gts[i].empty() && k % 2 == 0) {
                    const auto& g = gts[i][static_cast<std::size_t>(k) % gts[i].size()];
                    p = Box{g.cx + jitter(rng), g.cy + jitter(rng), g.w + jitter(rng) / 2, g.h + jitter(rng) / 2};
                } else {
                    p = Box{pos(rng), pos(rng), size(rng), size(rng)};
                }
                p.score = level(rng) / 8.0;
                preds[i].push_back(p);
            }
        }
        for (double thr : {0.3, 0.5, 0.7})
            for (int metric = 0; metric < 2; ++metric) {
                auto fn = metric == 0 ? iou_overlap() : iobb_overlap();
                const auto curve = eval::average_precision(preds, gts, fn, thr);
                if (!curve.ap) continue;
                worst = std::max(worst, std::abs(*curve.ap - oracle::average_precision(preds, gts, fn, thr)));
            }
    }
    return {hand && worst < 1e-9,
            std::string("hand cases ") + (hand ? "exact" : "WRONG") + ", max |AP - oracle| " + fmt(worst, 3) + " on 100 instances"};
}

Verdict mismatch_monotonicity() {
    data::PhantomSpec spec;
    std::vector<double> levels;
    for (double px : {0.0, 2.0, 4.0, 8.0}) {
        std::vector<data::MultiphaseSample> set;
        for (std::uint64_t s = 0; s < 50; ++s)
            set.push_back(data::generate_sample(spec, data::MisalignmentSpec::tier(px, 1000 + s), s));
        levels.push_back(eval::mismatch_level(set).value_or(0));
    }
    const bool ok = levels[0] > levels[1] && levels[1] > levels[2] && levels[2] > levels[3];
    return {ok, "mismatch 0/2/4/8px: " + fmt(levels[0], 5) + " " + fmt(levels[1], 5) + " " + fmt(levels[2], 5) + " " +
                    fmt(levels[3], 5)};
}

// Training runs shared by the robustness, ablation and sanity criteria: 400 train / 100 val,
// default schedule, one model per (seed, tier, variant).
class RunCache {
   public:
    struct Run {
        cli::TierOutcome outcome;
        double seconds = 0;
    };

    const Run& get(std::uint64_t seed, double px, const std::string& variant) {
        const auto key = std::to_string(seed) + "/" + fmt(px) + "/" + variant;
        if (auto it = runs_.find(key); it != runs_.end()) return it->second;
        auto cfg = config(seed, variant);
        const auto& data = dataset(cfg, px);
        const auto t0 = Clock::now();
        Run run{cli::train_and_evaluate(cfg, data.first, data.second, {}), 0};
        run.seconds = seconds_since(t0);
        std::cerr << "  trained " << key << " in " << fmt(run.seconds, 4) << " s, val AP";
        for (const auto& [metric, ap] : run.outcome.val.ap) std::cerr << " " << metric << " " << fmt(ap.value_or(-1), 4);
        std::cerr << "\n";
        return runs_.emplace(key, std::move(run)).first->second;
    }

   private:
    static cli::RunConfig config(std::uint64_t seed, const std::string& variant) {
        cli::RunConfig cfg;
        cfg.seed = seed;
        cfg.dataset.count = 500;
        cfg.dataset.split = {0.8, 0.2, 0.0};
        if (variant == "baseline") cfg.model.no_sa = cfg.model.no_dc = true;
        if (variant == "no_sa") cfg.model.no_sa = true;
        if (variant == "no_dc") cfg.model.no_dc = true;
        if (variant == "global_offsets") cfg.model.global_offsets = true;
        if (variant == "no_interphase_attention") cfg.model.no_interphase_attention = true;
        return cfg;
    }

    const std::pair<std::vector<Example>, std::vector<Example>>& dataset(const cli::RunConfig& cfg, double px) {
        const auto key = std::to_string(cfg.seed) + "/" + fmt(px);
        if (auto it = data_.find(key); it != data_.end()) return it->second;
        const auto splits = cli::generate_splits(cfg, data::MisalignmentSpec::tier(px));
        return data_.emplace(key, std::pair{to_examples(splits[0]), to_examples(splits[1])}).first->second;
    }

    std::map<std::string, Run> runs_;
    std::map<std::string, std::pair<std::vector<Example>, std::vector<Example>>> data_;
};

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

Verdict training_sanity(RunCache& cache) {
    const auto& run = cache.get(kSeeds[0], 0, "full");
    const double ap = run.outcome.val.at("IoU50").value_or(0);
    return {ap >= 0.80 && run.seconds <= 1800,
            "val AP@IoU50 " + fmt(ap, 4) + " (floor 0.80), " + fmt(run.seconds, 4) + " s (limit 1800)"};
}

double average_sensitivity(RunCache& cache, std::uint64_t seed, const std::string& variant) {
    const auto& tier8 = cache.get(seed, 8, variant).outcome;
    const auto& tier0 = cache.get(seed, 0, variant).outcome;
    return cli::tier_sensitivity("8px", tier8, tier0, false).average.value_or(
        std::numeric_limits<double>::quiet_NaN());
}

Verdict directional_robustness(RunCache& cache) {
    int wins = 0;
    std::string detail;
    for (auto seed : kSeeds) {
        const double full = average_sensitivity(cache, seed, "full");
        const double base = average_sensitivity(cache, seed, "baseline");
        wins += full < base;
        detail += "seed " + std::to_string(seed) + ": " + fmt(full, 4) + " vs " + fmt(base, 4) + "; ";
    }
    detail += std::to_string(wins) + "/3 lower";
    return {wins == 3, detail};
}

Verdict ablation_ordering(RunCache& cache) {
    auto mean_ap = [&](const std::string& variant) {
        double s = 0;
        for (auto seed : kSeeds) s += cache.get(seed, 8, variant).outcome.val.at("IoU50").value_or(0);
        return s / static_cast<double>(kSeeds.size());
    };
    const double full = mean_ap("full");
    bool ok = true;
    std::string detail = "full " + fmt(full, 4);
    for (const char* v : {"no_sa", "no_dc", "global_offsets", "no_interphase_attention"}) {
        const double ap = mean_ap(v);
        ok = ok && full >= ap;
        detail += ", " + std::string(v) + " " + fmt(ap, 4);
    }
    return {ok, detail};
}

std::map<std::string, std::string> read_tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) {
            std::ifstream in(e.path(), std::ios::binary);
            files[fs::relative(e.path(), root).string()] = std::string(std::istreambuf_iterator<char>(in), {});
        }
    return files;
}

Verdict determinism() {
    const auto root = fs::temp_directory_path() / "phasealign_acceptance_determinism";
    fs::remove_all(root);
    cli::RunConfig cfg;
    cfg.seed = 5;
    cfg.dataset.count = 40;
    cfg.dataset.tier_px = 4;
    cfg.train.iterations = 30;
    cfg.train.log_every = 5;
    std::vector<std::map<std::string, std::string>> trees;
    for (int rep = 0; rep < 2; ++rep) {
        fs::remove_all(root);
        cli::cmd_generate(cfg, root / "data", false);
        cli::cmd_train(cfg, root / "data", root / "train", false);
        cli::cmd_eval(cfg, root / "train" / "model.ckpt", root / "data", "val", root / "eval", false);
        trees.push_back(read_tree(root));
    }
    fs::remove_all(root);
    const bool has_log = trees[0].contains("train/train_log.csv") && trees[0].contains("eval/report.json");
    return {has_log && trees[0] == trees[1], std::to_string(trees[0].size()) + " artifacts compared byte for byte"};
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));
    RunCache cache;
    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"gradient correctness", gradient_correctness},
        {"identity at init", identity_at_init},
        {"deformable-to-regular reduction", deformable_reduction},
        {"attention normalization", attention_normalization},
        {"AP oracle equivalence", ap_oracle},
        {"mismatch monotonicity", mismatch_monotonicity},
        {"training sanity", [&] { return training_sanity(cache); }},
        {"directional robustness", [&] { return directional_robustness(cache); }},
        {"ablation ordering", [&] { return ablation_ordering(cache); }},
        {"determinism", determinism},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && !only.contains(id)) continue;
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        failures += !v.pass;
        std::cout << (v.pass ? "PASS" : "FAIL") << "  criterion " << id << " " << criteria[i].first << ": " << v.detail
                  << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
