#include <gtest/gtest.h>

#include <random>
#include <utility>

#include "oracles.hpp"
#include "phasealign/gradcheck.hpp"
#include "phasealign/nn/model.hpp"

using namespace phasealign;
using namespace phasealign::nn;
using TD = Tensor<double>;
using TF = Tensor<float>;

namespace {

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    EXPECT_EQ(a.shape(), b.shape());
    double m = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

TD weighted_sum(const TD& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto w = TD::uniform(y.shape(), -1.0, 1.0, rng);
    return sum(mul(y, w));
}

// Copy of x with every channel outside [c0, c0 + len) set to mid-window grey, which the
// detector's input centring maps to zero.
TF keep_channels(const TF& x, std::int64_t c0, std::int64_t len) {
    TF out = x.clone();
    const auto C = x.dim(1), plane = x.dim(2) * x.dim(3);
    for (std::int64_t n = 0; n < x.dim(0); ++n)
        for (std::int64_t c = 0; c < C; ++c)
            if (c < c0 || c >= c0 + len)
                for (std::int64_t i = 0; i < plane; ++i) out.vec()[(n * C + c) * plane + i] = 0.5f;
    return out;
}

template <typename T>
void randomize(Tensor<T>& t, double lo, double hi, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : t.data()) v = static_cast<T>(u(rng));
}

}  // namespace

// ---------------------------------------------------------------- self-attention

TEST(AttentionConfig, Validation) {
    EXPECT_NO_THROW(AttentionConfig::standard(32).validate());
    EXPECT_THROW(AttentionConfig::standard(12).validate(), std::invalid_argument);
    EXPECT_THROW(AttentionConfig::standard(32, 3).validate(), std::invalid_argument);
    EXPECT_THROW(AttentionConfig::standard(32, 1, 3).validate(), std::invalid_argument);
    const auto c = AttentionConfig::standard(64);
    EXPECT_EQ(c.query_channels, 8);
    EXPECT_EQ(c.value_channels, 32);
}

TEST(SelfAttention, IdentityAtInitBitExact) {
    for (int pool : {1, 2, 4, 8}) {
        std::mt19937_64 rng(pool);
        ParameterStore<float> store;
        SelfAttention<float> sa(store, "sa", AttentionConfig::standard(16, pool), rng);
        EXPECT_EQ(store["sa.sigma"].vec()[0], 0.f);
        auto x = TF::randn({2, 16, 8, 8}, rng);
        auto out = sa.forward(x);
        EXPECT_EQ(out.y.vec(), x.vec()) << "pool " << pool;
        for (float v : out.state.gated.vec()) EXPECT_EQ(v, 0.f);
    }
}

TEST(SelfAttention, ChannelMismatchRejected) {
    std::mt19937_64 rng(1);
    ParameterStore<float> store;
    SelfAttention<float> sa(store, "sa", AttentionConfig::standard(16), rng);
    EXPECT_THROW(sa.forward(TF({1, 8, 4, 4})), ShapeError);
}

TEST(SelfAttention, BetaRowsAreDistributions) {
    for (int pool : {1, 2, 4, 8}) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            std::mt19937_64 rng(seed * 17 + pool);
            ParameterStore<float> store;
            SelfAttention<float> sa(store, "sa", AttentionConfig::standard(16, pool), rng);
            store["sa.sigma"].vec()[0] = 0.7f;
            auto x = TF::randn({2, 16, 8, 8}, rng);
            auto beta = sa.forward(x).state.beta;
            const std::int64_t M = (8 / pool) * (8 / pool);
            ASSERT_EQ(beta.shape(), (Shape{2, 64, M}));
            for (std::int64_t r = 0; r < beta.dim(0) * beta.dim(1); ++r) {
                double s = 0;
                for (std::int64_t i = 0; i < M; ++i) {
                    EXPECT_GE(beta.vec()[r * M + i], 0.f);
                    s += beta.vec()[r * M + i];
                }
                EXPECT_NEAR(s, 1.0, 1e-5);
            }
        }
    }
}

TEST(SelfAttention, ConstantInputGivesUniformBeta) {
    std::mt19937_64 rng(4);
    ParameterStore<float> store;
    SelfAttention<float> sa(store, "sa", AttentionConfig::standard(8, 2), rng);
    auto beta = sa.forward(TF::full({1, 8, 8, 8}, 0.3f)).state.beta;
    for (float v : beta.vec()) EXPECT_NEAR(v, 1.f / 16.f, 1e-7);
}

TEST(SelfAttention, PoolingIsLosslessOnBlockConstantInput) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(seed);
        ParameterStore<float> s1, s2;
        SelfAttention<float> a1(s1, "sa", AttentionConfig::standard(16, 1), rng);
        SelfAttention<float> a2(s2, "sa", AttentionConfig::standard(16, 2), rng);
        for (std::size_t i = 0; i < s1.size(); ++i) s2.all()[i].tensor.vec() = s1.all()[i].tensor.vec();
        s1["sa.sigma"].vec()[0] = s2["sa.sigma"].vec()[0] = 0.8f;

        auto coarse = TF::randn({2, 16, 4, 4}, rng);
        TF x({2, 16, 8, 8});
        for (std::int64_t nc = 0; nc < 32; ++nc)
            for (int y = 0; y < 8; ++y)
                for (int xx = 0; xx < 8; ++xx) x.vec()[(nc * 8 + y) * 8 + xx] = coarse.vec()[(nc * 4 + y / 2) * 4 + xx / 2];
        auto y1 = a1.forward(x).y;
        auto y2 = a2.forward(x).y;
        EXPECT_LT(max_abs_diff(y1, y2), 1e-5);
        EXPECT_GT(max_abs_diff(y1, x), 1e-3);  // the residual actually contributes
    }
}

TEST(SelfAttention, GroupedAttentionKeepsPhasesApart) {
    std::mt19937_64 rng(9);
    ParameterStore<float> store;
    SelfAttention<float> sa(store, "sa", AttentionConfig::standard(32, 1, 4), rng);
    store["sa.sigma"].vec()[0] = 1.f;
    EXPECT_EQ(store["sa.query.weight"].shape(), (Shape{4, 8, 1, 1}));
    auto x = TF::randn({1, 32, 6, 6}, rng);
    auto base = sa.forward(x).y;
    auto x2 = x.clone();
    for (std::int64_t i = 8 * 36; i < 16 * 36; ++i) x2.vec()[i] += 1.f;  // perturb phase 1 only
    auto moved = sa.forward(x2).y;
    for (std::int64_t c = 0; c < 32; ++c) {
        double d = 0;
        for (std::int64_t i = 0; i < 36; ++i) d = std::max(d, double(std::abs(base.vec()[c * 36 + i] - moved.vec()[c * 36 + i])));
        if (c / 8 == 1)
            EXPECT_GT(d, 1e-3) << c;
        else
            EXPECT_EQ(d, 0.0) << c;
    }
}

class ModuleGradcheck : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(ModuleGradcheck, SelfAttentionBlock) {
    for (int pool : {1, 2}) {
        std::mt19937_64 rng(GetParam() * 31 + pool);
        ParameterStore<double> store;
        SelfAttention<double> sa(store, "sa", AttentionConfig::standard(8, pool), rng);
        store["sa.sigma"].vec()[0] = 0.6;
        std::vector<TD> inputs{TD::randn({1, 8, 4, 4}, rng)};
        for (auto& p : store.all()) inputs.push_back(p.tensor);
        const auto seed = GetParam();
        auto r = gradcheck([&](std::vector<TD>& in) { return weighted_sum(sa.forward(in[0]).y, seed); }, inputs);
        EXPECT_LT(r.max_rel_error, 1e-4) << "pool " << pool;
    }
}

TEST_P(ModuleGradcheck, GroupedSelfAttentionBlock) {
    std::mt19937_64 rng(GetParam() + 500);
    ParameterStore<double> store;
    SelfAttention<double> sa(store, "sa", AttentionConfig::standard(16, 1, 2), rng);
    store["sa.sigma"].vec()[0] = -0.4;
    std::vector<TD> inputs{TD::randn({1, 16, 3, 3}, rng)};
    for (auto& p : store.all()) inputs.push_back(p.tensor);
    const auto seed = GetParam();
    auto r = gradcheck([&](std::vector<TD>& in) { return weighted_sum(sa.forward(in[0]).y, seed); }, inputs);
    EXPECT_LT(r.max_rel_error, 1e-4);
}

// Offsets = bias + small data-dependent term keeps every sample point away from the
// lattice, where bilinear interpolation has kinks.
TEST_P(ModuleGradcheck, GuidedDeformableBlock) {
    for (bool shared : {false, true}) {
        std::mt19937_64 rng(GetParam() * 7 + shared);
        ParameterStore<double> store;
        DeformConfig cfg{4, 4, 4, 2, shared, 3};
        PhasewiseDeformConv<double> dc(store, "dc", cfg, rng);
        randomize(dc.offset_weight(), -0.15 / (8 * 9), 0.15 / (8 * 9), rng);
        randomize(dc.offset_bias(), 0.3, 0.4, rng);
        randomize(dc.bias(), -0.5, 0.5, rng);
        auto x = TD::uniform({1, 4, 4, 4}, -1, 1, rng);
        auto guide = TD::uniform({1, 4, 4, 4}, -1, 1, rng);
        std::vector<TD> inputs{x, guide};
        for (auto& p : store.all()) inputs.push_back(p.tensor);
        const auto seed = GetParam();
        auto r = gradcheck(
            [&](std::vector<TD>& in) {
                return weighted_sum(dc.forward(in[0], concat(std::vector<TD>{in[0], in[1]}, 1)).y, seed);
            },
            inputs);
        EXPECT_LT(r.max_rel_error, 1e-4) << "shared " << shared;
    }
}

// Attention feeding the deformable block through the sigma-scaled guidance: gradients
// reach the attention projections and sigma through the offset path.
TEST_P(ModuleGradcheck, AttentionGuidedAlignment) {
    std::mt19937_64 rng(GetParam() + 900);
    ParameterStore<double> store;
    SelfAttention<double> sa(store, "sa", AttentionConfig::standard(8, 1), rng);
    PhasewiseDeformConv<double> dc(store, "dc", {8, 8, 8, 4, false, 3}, rng);
    store["sa.sigma"].vec()[0] = 0.5;
    randomize(dc.offset_weight(), -0.1 / (16 * 9 * 4), 0.1 / (16 * 9 * 4), rng);
    randomize(dc.offset_bias(), 0.3, 0.4, rng);
    std::vector<TD> inputs{TD::uniform({1, 8, 3, 3}, -1, 1, rng)};
    for (auto& p : store.all()) inputs.push_back(p.tensor);
    const auto seed = GetParam();
    auto r = gradcheck(
        [&](std::vector<TD>& in) {
            auto a = sa.forward(in[0]);
            return weighted_sum(dc.forward(a.y, concat(std::vector<TD>{a.y, a.state.gated}, 1)).y, seed);
        },
        inputs);
    EXPECT_LT(r.max_rel_error, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Seeds, ModuleGradcheck, ::testing::Range<std::uint64_t>(0, 10));

// ---------------------------------------------------------------- deformable block

TEST(DeformConfig, PhaseCountMustDivideChannels) {
    std::mt19937_64 rng(0);
    ParameterStore<float> store;
    EXPECT_THROW(PhasewiseDeformConv<float>(store, "dc", {6, 8, 0, 4, false, 3}, rng), std::invalid_argument);
    EXPECT_THROW(PhasewiseDeformConv<float>(store, "dc2", {8, 8, 0, 4, false, 2}, rng), std::invalid_argument);
}

TEST(PhasewiseDeform, ParametersCarryReducedLearningRate) {
    std::mt19937_64 rng(0);
    ParameterStore<float> store;
    PhasewiseDeformConv<float> dc(store, "dc", {8, 8, 8, 4, false, 3}, rng);
    EXPECT_EQ(store.at("dc.offset.weight").tensor.shape(), (Shape{72, 16, 3, 3}));
    for (const auto& p : store.all()) EXPECT_FLOAT_EQ(p.lr_scale, 0.1f) << p.name;
    for (float v : dc.offset_weight().vec()) EXPECT_EQ(v, 0.f);
}

TEST(PhasewiseDeform, ZeroOffsetsMatchGroupedConv) {
    for (std::uint64_t draw = 0; draw < 20; ++draw) {
        std::mt19937_64 rng(draw);
        ParameterStore<float> store;
        PhasewiseDeformConv<float> dc(store, "dc", {8, 12, 8, 4, false, 3}, rng);
        randomize(dc.bias(), -1, 1, rng);
        auto x = TF::randn({2, 8, 7, 6}, rng);
        auto guided = TF::randn({2, 16, 7, 6}, rng);
        auto init = dc.forward(x, guided);  // zero-initialised predictor
        for (float v : init.offsets.vec()) EXPECT_EQ(v, 0.f);
        auto regular = conv2d(x, dc.weight(), dc.bias(), {.padding = 1, .groups = 4});
        EXPECT_LT(max_abs_diff(init.y, regular), 1e-5) << draw;
        EXPECT_LT(max_abs_diff(dc.forward_regular(x), regular), 1e-6);
    }
}

TEST(PhasewiseDeform, ConstantShiftOnOnePhase) {
    std::mt19937_64 rng(12);
    ParameterStore<float> store;
    const int P = 4, Cg = 2, K = 9;
    PhasewiseDeformConv<float> dc(store, "dc", {P * Cg, P * Cg, 0, P, false, 3}, rng);
    const int H = 6, W = 7, shifted = 2;
    auto x = TF::randn({1, P * Cg, H, W}, rng);
    for (int t = 0; t < K; ++t) dc.offset_bias().vec()[2 * (shifted * K + t) + 1] = 1.f;  // dx = +1
    auto y = dc.forward(x, x).y;

    // Oracle: shift the phase left by one column, then convolve regularly. The left border
    // column differs (padding vs. real data) and is excluded.
    auto xs = x.clone();
    for (int c = shifted * Cg; c < (shifted + 1) * Cg; ++c)
        for (int r = 0; r < H; ++r)
            for (int q = 0; q < W; ++q) xs.vec()[(c * H + r) * W + q] = q + 1 < W ? x.vec()[(c * H + r) * W + q + 1] : 0.f;
    std::int64_t Ho, Wo;
    auto ref = oracle::conv2d(xs, dc.weight(), dc.bias().vec(), 1, 1, 1, P, Ho, Wo);
    auto plain = oracle::conv2d(x, dc.weight(), dc.bias().vec(), 1, 1, 1, P, Ho, Wo);
    for (int c = 0; c < P * Cg; ++c)
        for (int i = 0; i < H * W; ++i) {
            if (i % W == 0) continue;
            const auto k = static_cast<std::size_t>(c * H * W + i);
            const float expect = c / Cg == shifted ? ref[k] : plain[k];
            EXPECT_NEAR(y.vec()[k], expect, 1e-5) << c << "," << i;
        }
}

TEST(PhasewiseDeform, GuidanceWidthChecked) {
    std::mt19937_64 rng(0);
    ParameterStore<float> store;
    PhasewiseDeformConv<float> dc(store, "dc", {8, 8, 8, 4, false, 3}, rng);
    EXPECT_THROW(dc.forward(TF({1, 8, 4, 4}), TF({1, 8, 4, 4})), ShapeError);
}

TEST(PhasewiseDeform, GradientShortcutThroughGuidance) {
    std::mt19937_64 rng(21);
    ParameterStore<float> store;
    SelfAttention<float> sa(store, "sa", AttentionConfig::standard(16), rng);
    PhasewiseDeformConv<float> dc(store, "dc", {16, 16, 16, 4, false, 3}, rng);
    randomize(dc.offset_weight(), -0.05, 0.05, rng);
    randomize(dc.offset_bias(), 0.2, 0.4, rng);
    ASSERT_EQ(store["sa.sigma"].vec()[0], 0.f);

    auto x = TF::randn({1, 16, 6, 6}, rng);
    auto a = sa.forward(x);
    auto loss = sum(mul(dc.forward(a.y, concat(std::vector<TF>{a.y, a.state.gated}, 1)).y,
                        TF::uniform({1, 16, 6, 6}, -1, 1, rng)));
    backward(loss);
    ASSERT_TRUE(a.state.gated.has_grad());
    double gate_grad = 0;
    for (float g : std::as_const(a.state.gated).grad()) gate_grad += std::abs(g);
    EXPECT_GT(gate_grad, 0.0);
    EXPECT_NE(store["sa.sigma"].grad()[0], 0.f);
}

// ---------------------------------------------------------------- fusion

TEST(ChannelFusion, IdentityKernelPassesThrough) {
    std::mt19937_64 rng(2);
    auto x = TF::randn({2, 4, 5, 5}, rng);
    TF w({4, 4, 1, 1});
    for (int c = 0; c < 4; ++c) w.vec()[c * 4 + c] = 1.f;
    EXPECT_EQ(channel_fusion(x, w, TF({4})).vec(), x.vec());
}

TEST(ChannelFusion, AveragingKernelGivesPhaseMean) {
    std::mt19937_64 rng(3);
    auto x = TF::randn({1, 4, 3, 3}, rng);
    auto y = channel_fusion(x, TF::full({1, 4, 1, 1}, 0.25f), TF({1}));
    for (int i = 0; i < 9; ++i) {
        float m = 0;
        for (int c = 0; c < 4; ++c) m += x.vec()[c * 9 + i];
        EXPECT_NEAR(y.vec()[i], m / 4, 1e-6);
    }
}

TEST(ChannelFusion, MatchesPixelwiseMatmul) {
    std::mt19937_64 rng(4);
    auto x = TF::randn({2, 6, 4, 5}, rng);
    auto w = TF::randn({3, 6, 1, 1}, rng);
    auto b = TF::randn({3}, rng);
    auto y = channel_fusion(x, w, b);
    for (int n = 0; n < 2; ++n)
        for (int p = 0; p < 20; ++p) {
            std::vector<float> pix(6);
            for (int c = 0; c < 6; ++c) pix[c] = x.vec()[(n * 6 + c) * 20 + p];
            auto out = oracle::matmul(w.vec(), pix, 3, 6, 1);
            for (int f = 0; f < 3; ++f) EXPECT_NEAR(y.vec()[(n * 3 + f) * 20 + p], out[f] + b.vec()[f], 1e-6);
        }
}

TEST(ChannelFusion, RejectsSpatialKernel) {
    EXPECT_THROW(channel_fusion(TF({1, 2, 3, 3}), TF({2, 2, 3, 3}), TF({2})), ShapeError);
}

// ---------------------------------------------------------------- backbone and model

TEST(Backbone, MidGreyInputGivesZeroFeaturesAtInit) {
    std::mt19937_64 rng(0);
    Detector<float> model({}, rng);
    const auto f = model.stem(TF::full({1, 12, 96, 96}, 0.5f));
    for (float v : f.vec()) EXPECT_EQ(v, 0.f);
}

TEST(Backbone, PhaseOnlyInputActivatesOnlyItsGroup) {
    std::mt19937_64 rng(1);
    Detector<float> model({}, rng);
    auto x = TF::uniform({1, 12, 96, 96}, 0, 1, rng);
    for (int p = 0; p < 4; ++p) {
        auto f = model.stem(keep_channels(x, 3 * p, 3));
        const std::int64_t plane = f.dim(2) * f.dim(3), per = f.dim(1) / 4;
        for (std::int64_t c = 0; c < f.dim(1); ++c) {
            double m = 0;
            for (std::int64_t i = 0; i < plane; ++i) m = std::max(m, double(std::abs(f.vec()[c * plane + i])));
            if (c / per != p) EXPECT_EQ(m, 0.0) << "phase " << p << " channel " << c;
        }
    }
}

TEST(Backbone, GroupIsolationWithBiases) {
    std::mt19937_64 rng(2);
    Detector<float> model({}, rng);
    for (auto& p : model.params().all())
        if (p.name.ends_with(".bias")) randomize(p.tensor, -0.2, 0.2, rng);
    auto x = TF::uniform({2, 12, 96, 96}, 0, 1, rng);
    auto full = model.stem(x);
    const std::int64_t per = full.dim(1) / 4, plane = full.dim(2) * full.dim(3);
    for (int p = 0; p < 4; ++p) {
        auto alone = model.stem(keep_channels(x, 3 * p, 3));
        double d = 0;
        for (std::int64_t n = 0; n < 2; ++n)
            for (std::int64_t c = p * per; c < (p + 1) * per; ++c)
                for (std::int64_t i = 0; i < plane; ++i) {
                    const auto k = (n * full.dim(1) + c) * plane + i;
                    d = std::max(d, double(std::abs(full.vec()[k] - alone.vec()[k])));
                }
        EXPECT_LT(d, 1e-6) << "phase " << p;
    }
}

TEST(Backbone, WrongChannelCountRejected) {
    std::mt19937_64 rng(0);
    Detector<float> model({}, rng);
    EXPECT_THROW(model.forward(TF({1, 3, 96, 96})), ShapeError);
    EXPECT_THROW(model.forward(TF({1, 12, 64, 64})), ShapeError);
}

TEST(Detector, OutputShapesMatchAnchors) {
    std::mt19937_64 rng(0);
    Detector<float> model({}, rng);
    EXPECT_EQ(model.anchors().size(), 1440u);
    auto out = model.forward(TF::uniform({2, 12, 96, 96}, 0, 1, rng));
    EXPECT_EQ(out.logits.shape(), (Shape{2, 1440, 2}));
    EXPECT_EQ(out.regressions.shape(), (Shape{2, 1440, 4}));
    EXPECT_EQ(out.attention.size(), 2u);
    EXPECT_EQ(out.offsets.shape(), (Shape{2, 72, 24, 24}));
}

TEST(Detector, IdentityAtInitAgainstSharedWeightBaseline) {
    std::mt19937_64 rng(5);
    Detector<float> model({}, rng);
    for (int trial = 0; trial < 3; ++trial) {
        auto x = TF::uniform({1, 12, 96, 96}, 0, 1, rng);
        auto full = model.forward(x);
        auto base = model.forward(x, {.bypass_attention = true, .regular_dc = true});
        EXPECT_LT(max_abs_diff(full.logits, base.logits), 1e-5);
        EXPECT_LT(max_abs_diff(full.regressions, base.regressions), 1e-5);
    }
}

TEST(Detector, AblationsAreWellFormed) {
    struct Case {
        const char* name;
        ModelConfig cfg;
    };
    std::vector<Case> cases{{"no_sa", {.no_sa = true}},
                            {"no_dc", {.no_dc = true}},
                            {"global_offsets", {.global_offsets = true}},
                            {"no_interphase_attention", {.no_interphase_attention = true}},
                            {"portal_only", {.portal_only = true}},
                            {"baseline", {.no_sa = true, .no_dc = true}}};
    for (auto& c : cases) {
        std::mt19937_64 rng(3);
        Detector<float> model(c.cfg, rng);
        auto x = TF::uniform({1, c.cfg.in_channels(), 96, 96}, 0, 1, rng);
        auto out = model.forward(x);
        EXPECT_EQ(out.logits.shape(), (Shape{1, 1440, 2})) << c.name;
        for (float v : out.logits.vec()) ASSERT_TRUE(std::isfinite(v)) << c.name;
        EXPECT_EQ(model.params().contains("sa1.sigma"), !c.cfg.no_sa) << c.name;
        EXPECT_EQ(model.params().contains("align.offset.weight"), !c.cfg.no_dc) << c.name;
    }
    std::mt19937_64 rng(0);
    Detector<float> global({.global_offsets = true}, rng);
    EXPECT_EQ(global.params()["align.offset.weight"].dim(0), 18);
    Detector<float> grouped({.no_interphase_attention = true}, rng);
    EXPECT_EQ(grouped.params()["sa1.value.weight"].shape(), (Shape{16, 8, 1, 1}));
    Detector<float> portal({.portal_only = true}, rng);
    EXPECT_EQ(portal.params()["backbone.conv1.weight"].shape(), (Shape{16, 3, 3, 3}));
}

TEST(Detector, BackwardReachesEveryParameter) {
    std::mt19937_64 rng(8);
    Detector<float> model({}, rng);
    auto out = model.forward(TF::uniform({1, 12, 96, 96}, 0, 1, rng));
    auto loss = add(sum(mul(out.logits, out.logits)), sum(mul(out.regressions, out.regressions)));
    backward(loss);
    std::size_t with_grad = 0;
    for (auto& p : model.params().all()) with_grad += p.tensor.has_grad();
    EXPECT_EQ(with_grad, model.params().size());
}
