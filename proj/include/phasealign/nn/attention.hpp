#pragma once

#include "phasealign/ops.hpp"
#include "phasealign/optim.hpp"

namespace phasealign::nn {

/// Bottleneck sizes and spatial pooling for one self-attention block.
struct AttentionConfig {
    int channels = 0;
    int query_channels = 0;  // shared by query and key
    int value_channels = 0;
    int pool = 1;            // D: query and value are average-pooled by D x D
    int groups = 1;          // >1 restricts attention to within each phase group

    /// C/8 query/key channels and C/2 value channels.
    static AttentionConfig standard(int channels, int pool = 1, int groups = 1) {
        return {channels, channels / 8, channels / 2, pool, groups};
    }

    void validate() const {
        if (channels <= 0 || channels % 8 != 0)
            throw std::invalid_argument("attention: channel count must be a positive multiple of 8, got " +
                                        std::to_string(channels));
        if (pool != 1 && pool != 2 && pool != 4 && pool != 8)
            throw std::invalid_argument("attention: pool factor must be one of 1, 2, 4, 8, got " + std::to_string(pool));
        if (query_channels <= 0 || value_channels <= 0)
            throw std::invalid_argument("attention: bottleneck channel counts must be positive");
        if (groups < 1 || channels % groups || query_channels % groups || value_channels % groups)
            throw std::invalid_argument("attention: channel counts must divide evenly into " + std::to_string(groups) +
                                        " groups");
    }
};

/// Intermediate maps of one attention pass, kept for export and inspection.
template <typename T>
struct AttentionState {
    Tensor<T> beta;            // [B*groups, N, N/D^2], rows sum to one
    Tensor<T> gate_map;        // g: [B, C_hat, H, W]
    Tensor<T> projected_gate;  // o = W_o g: [B, C, H, W]
    Tensor<T> gated;           // sigma * o, the residual term and the alignment guidance
    T sigma = T(0);
};

template <typename T>
struct AttentionOutput {
    Tensor<T> y;
    AttentionState<T> state;
};

/// Convolutional self-attention with a zero-initialised residual gate:
///   q = W_q x, k = W_k x, v = W_v x (1x1 convs), q and v pooled by D,
///   beta = softmax over pooled positions of k^T q~, g = v~ beta^T, y = sigma * W_o g + x.
template <typename T>
class SelfAttention {
   public:
    SelfAttention() = default;

    template <typename Rng>
    SelfAttention(ParameterStore<T>& store, const std::string& prefix, AttentionConfig cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const std::int64_t C = cfg.channels, G = cfg.groups;
        // No query bias: k_j . b is constant along the softmax axis and cancels.
        wq_ = store.add_weight(prefix + ".query.weight", {cfg.query_channels, C / G, 1, 1}, rng);
        wk_ = store.add_weight(prefix + ".key.weight", {cfg.query_channels, C / G, 1, 1}, rng);
        bk_ = store.add_zeros(prefix + ".key.bias", {cfg.query_channels});
        wv_ = store.add_weight(prefix + ".value.weight", {cfg.value_channels, C / G, 1, 1}, rng);
        bv_ = store.add_zeros(prefix + ".value.bias", {cfg.value_channels});
        wo_ = store.add_weight(prefix + ".out.weight", {C, cfg.value_channels / G, 1, 1}, rng);
        bo_ = store.add_zeros(prefix + ".out.bias", {C});
        sigma_ = store.add_zeros(prefix + ".sigma", {1});
    }

    const AttentionConfig& config() const { return cfg_; }
    Tensor<T>& sigma() { return sigma_; }

    AttentionOutput<T> forward(const Tensor<T>& x) const {
        detail::require(x.rank() == 4 && x.dim(1) == cfg_.channels,
                        "self-attention: expected " + std::to_string(cfg_.channels) + " input channels, got " +
                            to_string(x.shape()));
        const std::int64_t B = x.dim(0), H = x.dim(2), W = x.dim(3), N = H * W, G = cfg_.groups;
        const Conv2dOptions pointwise{.groups = cfg_.groups};
        auto q = conv2d(x, wq_, Tensor<T>{}, pointwise);
        auto k = conv2d(x, wk_, bk_, pointwise);
        auto v = conv2d(x, wv_, bv_, pointwise);
        auto q_pooled = avg_pool2d(q, cfg_.pool);
        auto v_pooled = avg_pool2d(v, cfg_.pool);
        const std::int64_t M = q_pooled.dim(2) * q_pooled.dim(3);
        const std::int64_t cq = cfg_.query_channels / G, cv = cfg_.value_channels / G;

        auto keys = reshape(k, {B * G, cq, N});
        auto queries = reshape(q_pooled, {B * G, cq, M});
        auto values = reshape(v_pooled, {B * G, cv, M});
        // scores[j, i] = k_j . q~_i; each full-resolution location j distributes over pooled i.
        auto scores = bmm(keys, queries, true, false);
        auto beta = softmax(scores, 2);
        auto gate = reshape(bmm(values, beta, false, true), {B, cfg_.value_channels, H, W});
        auto projected = conv2d(gate, wo_, bo_, pointwise);
        auto gated = scale_by(projected, sigma_);
        auto y = add(gated, x);
        return {y, {beta, gate, projected, gated, sigma_.vec()[0]}};
    }

   private:
    AttentionConfig cfg_;
    Tensor<T> wq_, wk_, bk_, wv_, bv_, wo_, bo_, sigma_;
};

}  // namespace phasealign::nn
