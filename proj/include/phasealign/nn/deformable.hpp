#pragma once

#include "phasealign/deform_conv.hpp"
#include "phasealign/optim.hpp"

namespace phasealign::nn {

/// Learning-rate multiplier applied to every parameter of the deformable block.
inline constexpr double kDeformLrScale = 0.1;

struct DeformConfig {
    int in_channels = 0;
    int out_channels = 0;
    int guide_channels = 0;  // channels of the attention guidance concatenated to the input
    int phases = 4;
    bool shared_offsets = false;  // one offset field for all phases instead of one per phase
    int kernel = 3;

    int offset_groups() const { return shared_offsets ? 1 : phases; }
    int taps() const { return kernel * kernel; }

    void validate() const {
        if (phases < 1 || in_channels % phases || out_channels % phases)
            throw std::invalid_argument("deformable block: phase count " + std::to_string(phases) +
                                        " does not divide channels " + std::to_string(in_channels) + " -> " +
                                        std::to_string(out_channels));
        if (kernel % 2 == 0) throw std::invalid_argument("deformable block: kernel size must be odd");
    }
};

template <typename T>
struct DeformOutput {
    Tensor<T> y;
    Tensor<T> offsets;  // [B, 2*K*offset_groups, H, W]
};

/// Phase-wise deformable convolution. A zero-initialised 3x3 predictor reads the
/// feature map concatenated with the attention guidance and emits one (dy, dx) field per
/// phase and kernel tap; phase p's channel group is then convolved on its own warped grid.
template <typename T>
class PhasewiseDeformConv {
   public:
    PhasewiseDeformConv() = default;

    template <typename Rng>
    PhasewiseDeformConv(ParameterStore<T>& store, const std::string& prefix, DeformConfig cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const T scale = static_cast<T>(kDeformLrScale);
        const std::int64_t offset_channels = 2 * cfg.taps() * cfg.offset_groups();
        offset_w_ = store.add_zeros(prefix + ".offset.weight",
                                    {offset_channels, cfg.in_channels + cfg.guide_channels, cfg.kernel, cfg.kernel}, scale);
        offset_b_ = store.add_zeros(prefix + ".offset.bias", {offset_channels}, scale);
        w_ = store.add_weight(prefix + ".weight", {cfg.out_channels, cfg.in_channels / cfg.phases, cfg.kernel, cfg.kernel},
                              rng, scale);
        b_ = store.add_zeros(prefix + ".bias", {cfg.out_channels}, scale);
    }

    const DeformConfig& config() const { return cfg_; }
    Tensor<T>& offset_weight() { return offset_w_; }
    Tensor<T>& offset_bias() { return offset_b_; }
    Tensor<T>& weight() { return w_; }
    Tensor<T>& bias() { return b_; }

    /// guided_input = concat(x, guidance) along channels.
    DeformOutput<T> forward(const Tensor<T>& x, const Tensor<T>& guided_input) const {
        detail::require(x.rank() == 4 && x.dim(1) == cfg_.in_channels,
                        "deformable block: expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                            to_string(x.shape()));
        detail::require(guided_input.rank() == 4 && guided_input.dim(1) == cfg_.in_channels + cfg_.guide_channels,
                        "deformable block: guided input must carry " +
                            std::to_string(cfg_.in_channels + cfg_.guide_channels) + " channels, got " +
                            to_string(guided_input.shape()));
        const int pad = cfg_.kernel / 2;
        auto offsets = conv2d(guided_input, offset_w_, offset_b_, {.padding = pad});
        return {forward_with_offsets(x, offsets), offsets};
    }

    Tensor<T> forward_with_offsets(const Tensor<T>& x, const Tensor<T>& offsets) const {
        return deform_conv2d(x, offsets, w_, b_,
                             {.groups = cfg_.phases, .offset_groups = cfg_.offset_groups(), .padding = cfg_.kernel / 2});
    }

    /// The same weights on the regular sampling grid.
    Tensor<T> forward_regular(const Tensor<T>& x) const {
        return conv2d(x, w_, b_, {.padding = cfg_.kernel / 2, .groups = cfg_.phases});
    }

   private:
    DeformConfig cfg_;
    Tensor<T> offset_w_, offset_b_, w_, b_;
};

}  // namespace phasealign::nn
