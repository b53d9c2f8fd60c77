#pragma once

#include <optional>

#include "phasealign/detector/anchors.hpp"
#include "phasealign/nn/attention.hpp"
#include "phasealign/nn/deformable.hpp"

namespace phasealign::nn {

/// Pointwise conv mixing every phase group of `x`.
template <typename T>
Tensor<T> channel_fusion(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    detail::require(w.rank() == 4 && w.dim(2) == 1 && w.dim(3) == 1, "channel fusion needs a 1x1 kernel, got " +
                                                                         to_string(w.shape()));
    return conv2d(x, w, b);
}

/// Architecture switches. Each ablation flag removes one ingredient of the full model.
struct ModelConfig {
    int image_size = 96;
    int slices = 3;
    int pool = 1;  // attention pooling factor D
    bool no_sa = false;
    bool no_dc = false;
    bool global_offsets = false;
    bool no_interphase_attention = false;
    bool portal_only = false;
    AnchorSpec anchors = AnchorSpec::standard();

    int phases() const { return portal_only ? 1 : 4; }
    int in_channels() const { return phases() * slices; }
};

/// Stage widths of the backbone. Both source maps keep a whole number of channels per
/// phase group.
struct BackboneWidths {
    int c1 = 16, c2 = 32, c3 = 32, c4 = 64, c5 = 64;
};

/// Switches that evaluate the same parameters as a plainer network.
struct ForwardOptions {
    bool bypass_attention = false;  // skip both attention blocks, zero guidance
    bool regular_dc = false;        // run the deformable block's weights on the regular grid
};

template <typename T>
struct ModelOutput {
    Tensor<T> logits;       // [B, anchors, 2]
    Tensor<T> regressions;  // [B, anchors, 4]
    std::vector<AttentionState<T>> attention;
    Tensor<T> offsets;  // [B, 2*K*offset_groups, H1, W1], undefined without the deformable block
};

template <typename T>
class Detector {
   public:
    template <typename Rng>
    Detector(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
        const int P = cfg.phases();
        const BackboneWidths w;
        if (cfg.image_size % 8) throw std::invalid_argument("image size must be a multiple of 8");
        auto conv = [&](const std::string& name, int in, int out, int k, int groups) {
            params_.add_weight(name + ".weight", {out, in / groups, k, k}, rng);
            params_.add_zeros(name + ".bias", {out});
        };
        conv("backbone.conv1", cfg.in_channels(), w.c1, 3, P);
        conv("backbone.conv2", w.c1, w.c2, 3, P);
        conv("backbone.conv3", w.c2, w.c3, 3, P);

        const int attention_groups = cfg.no_interphase_attention ? P : 1;
        if (!cfg.no_sa) sa1_.emplace(params_, "sa1", AttentionConfig::standard(w.c3, cfg.pool, attention_groups), rng);
        if (cfg.no_dc) {
            conv("align.conv", w.c3, w.c3, 3, P);
        } else {
            dc_.emplace(params_, "align",
                        DeformConfig{w.c3, w.c3, w.c3, P, cfg.global_offsets, 3}, rng);
        }

        conv("backbone.conv4", w.c3, w.c4, 3, P);
        conv("backbone.conv5", w.c4, w.c5, 3, P);
        if (!cfg.no_sa) sa2_.emplace(params_, "sa2", AttentionConfig::standard(w.c5, cfg.pool, attention_groups), rng);

        conv("fuse1", w.c3, w.c3, 1, 1);
        conv("fuse2", w.c5, w.c5, 1, 1);
        const int widths[2] = {w.c3, w.c5};
        if (cfg.anchors.sources.size() != 2 || cfg.anchors.sources[0].stride != 4 || cfg.anchors.sources[1].stride != 8)
            throw std::invalid_argument("detector expects two anchor sources at strides 4 and 8");
        for (int s = 0; s < 2; ++s) {
            const int A = cfg.anchors.sources[static_cast<std::size_t>(s)].per_cell();
            const std::string head = "head" + std::to_string(s + 1);
            conv(head + ".cls", widths[s], 2 * A, 3, 1);
            conv(head + ".reg", widths[s], 4 * A, 3, 1);
        }
        anchors_ = generate_anchors(cfg.image_size, cfg.image_size, cfg.anchors);
    }

    const ModelConfig& config() const { return cfg_; }
    ParameterStore<T>& params() { return params_; }
    const ParameterStore<T>& params() const { return params_; }
    const AnchorSet& anchors() const { return anchors_; }
    bool has_attention() const { return sa1_.has_value(); }
    bool has_deformable() const { return dc_.has_value(); }
    SelfAttention<T>* attention1() { return sa1_ ? &*sa1_ : nullptr; }
    PhasewiseDeformConv<T>* deformable() { return dc_ ? &*dc_ : nullptr; }

    /// Grouped backbone up to the first source map (stride 4).
    Tensor<T> stem(const Tensor<T>& x) const {
        detail::require(x.rank() == 4 && x.dim(1) == cfg_.in_channels(),
                        "detector: expected " + std::to_string(cfg_.in_channels()) + " input channels, got " +
                            to_string(x.shape()));
        detail::require(x.dim(2) == cfg_.image_size && x.dim(3) == cfg_.image_size,
                        "detector: expected " + std::to_string(cfg_.image_size) + " px input, got " +
                            to_string(x.shape()));
        auto h = block("backbone.conv1", affine(x, T(2), T(-1)), 2);
        h = block("backbone.conv2", h, 2);
        return block("backbone.conv3", h, 1);
    }

    /// Grouped backbone from the aligned first source to the second source map (stride 8).
    Tensor<T> deep(const Tensor<T>& aligned) const {
        auto h = block("backbone.conv4", aligned, 2);
        return block("backbone.conv5", h, 1);
    }

    ModelOutput<T> forward(const Tensor<T>& x, ForwardOptions opt = {}) const {
        ModelOutput<T> out;
        const auto f1 = stem(x);

        Tensor<T> y1 = f1, guide;
        if (sa1_ && !opt.bypass_attention) {
            auto a = sa1_->forward(f1);
            y1 = a.y;
            guide = a.state.gated;
            out.attention.push_back(a.state);
        } else {
            guide = Tensor<T>::zeros(f1.shape());
        }

        Tensor<T> aligned;
        if (dc_) {
            if (opt.regular_dc) {
                aligned = relu(dc_->forward_regular(y1));
            } else {
                auto d = dc_->forward(y1, concat(std::vector<Tensor<T>>{y1, guide}, 1));
                aligned = relu(d.y);
                out.offsets = d.offsets;
            }
        } else {
            aligned = block("align.conv", y1, 1);
        }

        auto f2 = deep(aligned);
        Tensor<T> y2 = f2;
        if (sa2_ && !opt.bypass_attention) {
            auto a = sa2_->forward(f2);
            y2 = a.y;
            out.attention.push_back(a.state);
        }

        const auto s1 = pointwise("fuse1", aligned);
        const auto s2 = pointwise("fuse2", y2);
        std::vector<Tensor<T>> cls, reg;
        const Tensor<T>* sources[2] = {&s1, &s2};
        for (int s = 0; s < 2; ++s) {
            const std::string head = "head" + std::to_string(s + 1);
            cls.push_back(flatten_head(head_conv(head + ".cls", *sources[s]), 2));
            reg.push_back(flatten_head(head_conv(head + ".reg", *sources[s]), 4));
        }
        out.logits = concat(cls, 1);
        out.regressions = concat(reg, 1);
        return out;
    }

   private:
    Tensor<T> block(const std::string& name, const Tensor<T>& x, int stride) const {
        const auto& w = params_.at(name + ".weight").tensor;
        const auto& b = params_.at(name + ".bias").tensor;
        return relu(conv2d(x, w, b, {.stride = stride, .padding = 1, .groups = cfg_.phases()}));
    }
    Tensor<T> pointwise(const std::string& name, const Tensor<T>& x) const {
        return relu(channel_fusion(x, params_.at(name + ".weight").tensor, params_.at(name + ".bias").tensor));
    }
    Tensor<T> head_conv(const std::string& name, const Tensor<T>& x) const {
        return conv2d(x, params_.at(name + ".weight").tensor, params_.at(name + ".bias").tensor, {.padding = 1});
    }

    ModelConfig cfg_;
    ParameterStore<T> params_;
    std::optional<SelfAttention<T>> sa1_, sa2_;
    std::optional<PhasewiseDeformConv<T>> dc_;
    AnchorSet anchors_;
};

}  // namespace phasealign::nn
