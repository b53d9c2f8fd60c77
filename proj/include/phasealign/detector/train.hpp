#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "phasealign/checkpoint.hpp"
#include "phasealign/data/container.hpp"
#include "phasealign/detector/loss.hpp"
#include "phasealign/detector/postprocess.hpp"
#include "phasealign/nn/model.hpp"

namespace phasealign {

/// Image plus boxes; all the trainer and evaluator need from a sample.
struct Example {
    std::vector<float> image;  // [phases*slices, S, S], phase-major
    std::vector<Box> boxes;
};

inline std::vector<Example> load_examples(data::DatasetReader& reader) {
    std::vector<Example> out;
    out.reserve(reader.size());
    for (std::size_t i = 0; i < reader.size(); ++i) out.push_back({reader.image(i), reader.boxes(i)});
    return out;
}

inline std::vector<Example> to_examples(const std::vector<data::MultiphaseSample>& samples) {
    std::vector<Example> out;
    for (const auto& s : samples) out.push_back({s.image, s.gt_boxes});
    return out;
}

/// Channels of a 12-channel image that the model consumes (the portal group alone for
/// portal_only models).
inline std::pair<std::size_t, std::size_t> input_channel_range(const nn::ModelConfig& cfg) {
    if (cfg.portal_only)
        return {static_cast<std::size_t>(data::kPortal * cfg.slices), static_cast<std::size_t>(cfg.slices)};
    return {0, static_cast<std::size_t>(cfg.in_channels())};
}

struct TrainConfig {
    int iterations = 2000;
    int batch = 8;
    double lr = 1e-3;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::vector<int> decay_steps{1000, 1700};
    double decay_factor = 0.1;
    int log_every = 10;
    int checkpoint_every = 0;  // 0: final checkpoint only
    bool augment = true;
    double mirror_prob = 0.5;
    double contrast_jitter = 0.1;    // multiplicative, x[1-c, 1+c]
    double brightness_jitter = 0.1;  // additive
    int neg_ratio = 3;
    double pos_iou = 0.5, neg_iou = 0.4;
    std::uint64_t seed = 0;

    void validate() const {
        auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
        if (iterations < 0 || batch < 1 || log_every < 1 || checkpoint_every < 0) fail("non-positive count");
        if (!(lr > 0) || momentum < 0 || weight_decay < 0 || !(decay_factor > 0)) fail("invalid optimiser setting");
        if (!std::is_sorted(decay_steps.begin(), decay_steps.end())) fail("decay steps must be ascending");
        if (mirror_prob < 0 || mirror_prob > 1 || contrast_jitter < 0 || brightness_jitter < 0)
            fail("invalid augmentation setting");
        if (neg_ratio < 1 || pos_iou < neg_iou) fail("invalid matching setting");
    }
};

/// Learning rate for a zero-based step.
inline double lr_at(const TrainConfig& cfg, int step) {
    double lr = cfg.lr;
    for (int d : cfg.decay_steps)
        if (step >= d) lr *= cfg.decay_factor;
    return lr;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finaliser over a combined word
    std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E5E9ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Dataset index drawn at global sample position `pos`: a fresh permutation per epoch.
class SampleOrder {
   public:
    SampleOrder(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {
        if (n == 0) throw std::invalid_argument("training set is empty");
    }

    std::size_t at(std::uint64_t pos) {
        const std::uint64_t epoch = pos / n_;
        if (epoch != epoch_ || perm_.empty()) {
            perm_.resize(n_);
            std::iota(perm_.begin(), perm_.end(), std::size_t{0});
            std::mt19937_64 rng(mix_seed(seed_, epoch));
            std::shuffle(perm_.begin(), perm_.end(), rng);
            epoch_ = epoch;
        }
        return perm_[pos % n_];
    }

   private:
    std::size_t n_;
    std::uint64_t seed_;
    std::uint64_t epoch_ = 0;
    std::vector<std::size_t> perm_;
};

/// Mirror and brightness/contrast jitter applied identically to every channel.
inline Example augment(const Example& ex, int image_size, const TrainConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0, 1);
    const bool mirror = u01(rng) < cfg.mirror_prob;
    const double gain = 1 + cfg.contrast_jitter * (2 * u01(rng) - 1);
    const double shift = cfg.brightness_jitter * (2 * u01(rng) - 1);
    Example out;
    out.image.resize(ex.image.size());
    const std::size_t S = static_cast<std::size_t>(image_size), plane = S * S;
    for (std::size_t c = 0; c < ex.image.size() / plane; ++c)
        for (std::size_t y = 0; y < S; ++y)
            for (std::size_t x = 0; x < S; ++x) {
                const float v = ex.image[c * plane + y * S + (mirror ? S - 1 - x : x)];
                out.image[c * plane + y * S + x] = static_cast<float>(v * gain + shift);
            }
    for (const auto& b : ex.boxes) out.boxes.push_back(mirror ? b.mirrored_x(image_size) : b);
    return out;
}

/// Stacks examples into a model input batch.
inline Tensor<float> make_batch(const std::vector<const Example*>& items, const nn::ModelConfig& cfg) {
    const auto [first, count] = input_channel_range(cfg);
    const std::size_t plane = static_cast<std::size_t>(cfg.image_size) * cfg.image_size;
    std::vector<float> data;
    data.reserve(items.size() * count * plane);
    for (const auto* ex : items) {
        if (ex->image.size() < (first + count) * plane)
            throw std::invalid_argument("example image is smaller than the model input");
        data.insert(data.end(), ex->image.begin() + static_cast<std::ptrdiff_t>(first * plane),
                    ex->image.begin() + static_cast<std::ptrdiff_t>((first + count) * plane));
    }
    return Tensor<float>({static_cast<std::int64_t>(items.size()), static_cast<std::int64_t>(count), cfg.image_size,
                          cfg.image_size},
                         std::move(data));
}

struct LogRow {
    int step = 0;  // one-based: the last step of the window
    double loss_cls = 0, loss_reg = 0, lr = 0;
};

inline std::string format_log(const std::vector<LogRow>& rows) {
    std::ostringstream os;
    os << "step,loss_cls,loss_reg,lr\n" << std::setprecision(9);
    for (const auto& r : rows) os << r.step << ',' << r.loss_cls << ',' << r.loss_reg << ',' << r.lr << '\n';
    return os.str();
}

class TrainingDiverged : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct TrainResult {
    std::vector<LogRow> log;
    int steps = 0;
    double seconds = 0;
};

struct TrainHooks {
    std::filesystem::path out_dir;  // checkpoints and divergence snapshots; empty = none
    std::function<void(const LogRow&)> on_log;
};

/// Trains `model` from `start_step` to cfg.iterations. Loss rows average each window of
/// log_every steps.
inline TrainResult train(nn::Detector<float>& model, const std::vector<Example>& examples, const TrainConfig& cfg,
                         const TrainHooks& hooks = {}, int start_step = 0) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const auto& mcfg = model.config();
    SampleOrder order(examples.size(), mix_seed(cfg.seed, 1));
    auto& params = model.params().all();
    TrainResult result;
    double win_cls = 0, win_reg = 0;
    int win = 0;
    for (int step = start_step; step < cfg.iterations; ++step) {
        std::vector<Example> batch;
        std::vector<MatchResult> matches;
        for (int j = 0; j < cfg.batch; ++j) {
            const std::uint64_t pos = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg.batch) +
                                      static_cast<std::uint64_t>(j);
            const auto& ex = examples[order.at(pos)];
            batch.push_back(cfg.augment ? augment(ex, mcfg.image_size, cfg, mix_seed(cfg.seed ^ 0xA5A5A5A5ULL, pos)) : ex);
            matches.push_back(match_anchors(model.anchors(), batch.back().boxes, cfg.pos_iou, cfg.neg_iou));
        }
        std::vector<const Example*> ptrs;
        for (const auto& e : batch) ptrs.push_back(&e);
        auto out = model.forward(make_batch(ptrs, mcfg));
        auto diverged = [&](const std::string& what) {
            std::string where;
            if (!hooks.out_dir.empty()) {
                const auto snap = hooks.out_dir / ("diverged_step" + std::to_string(step) + ".ckpt");
                write_checkpoint(snap, model.params(), step);
                where = ", snapshot " + snap.string();
            }
            return TrainingDiverged("non-finite " + what + " at step " + std::to_string(step) + where);
        };
        auto finite = [](const Tensor<float>& t) {
            return std::all_of(t.vec().begin(), t.vec().end(), [](float v) { return std::isfinite(v); });
        };
        if (!finite(out.logits) || !finite(out.regressions)) throw diverged("network output");
        auto loss = multibox_loss(out.logits, out.regressions, matches, cfg.neg_ratio);
        if (!std::isfinite(loss.cls) || !std::isfinite(loss.reg))
            throw diverged("loss (cls " + std::to_string(loss.cls) + ", reg " + std::to_string(loss.reg) + ")");
        backward(loss.total);
        const double lr = lr_at(cfg, step);
        sgd_step(params, static_cast<float>(lr), static_cast<float>(cfg.momentum), static_cast<float>(cfg.weight_decay));

        win_cls += loss.cls;
        win_reg += loss.reg;
        ++win;
        const int done = step + 1;
        if (done % cfg.log_every == 0 || done == cfg.iterations) {
            LogRow row{done, win_cls / win, win_reg / win, lr};
            result.log.push_back(row);
            if (hooks.on_log) hooks.on_log(row);
            win_cls = win_reg = 0;
            win = 0;
        }
        if (!hooks.out_dir.empty() && cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 &&
            done != cfg.iterations)
            write_checkpoint(hooks.out_dir / ("step" + std::to_string(done) + ".ckpt"), model.params(), done);
        result.steps = done;
    }
    if (!hooks.out_dir.empty()) write_checkpoint(hooks.out_dir / "model.ckpt", model.params(), cfg.iterations);
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

/// Detections for every example, evaluated in batches without recording a graph.
inline std::vector<std::vector<Box>> predict(const nn::Detector<float>& model, const std::vector<Example>& examples,
                                             const DecodeConfig& dcfg = {}, int batch = 16,
                                             nn::ForwardOptions opt = {}) {
    NoGradGuard guard;
    std::vector<std::vector<Box>> out;
    const auto A = model.anchors().size();
    for (std::size_t i = 0; i < examples.size(); i += static_cast<std::size_t>(batch)) {
        std::vector<const Example*> ptrs;
        for (std::size_t j = i; j < std::min(examples.size(), i + static_cast<std::size_t>(batch)); ++j)
            ptrs.push_back(&examples[j]);
        auto res = model.forward(make_batch(ptrs, model.config()), opt);
        const auto& z = res.logits.vec();
        const auto& r = res.regressions.vec();
        for (std::size_t b = 0; b < ptrs.size(); ++b)
            out.push_back(decode_detections(z.data() + b * A * 2, r.data() + b * A * 4, model.anchors(), dcfg));
    }
    return out;
}

}  // namespace phasealign
