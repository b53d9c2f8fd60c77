#include <gtest/gtest.h>

#include <random>

#include "phasealign/detector/loss.hpp"
#include "phasealign/detector/postprocess.hpp"
#include "phasealign/gradcheck.hpp"

using namespace phasealign;

namespace {

// Corner-form IoU written independently of the library.
double corner_iou(const Box& a, const Box& b) {
    const double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2, ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
    const double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2, by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
    const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
    const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
    const double inter = iw * ih;
    return inter / (a.w * a.h + b.w * b.h - inter);
}

std::vector<Box> random_gts(std::mt19937_64& rng, int n, double img = 96) {
    std::uniform_real_distribution<double> size(8, 40), u(0, 1);
    std::vector<Box> g;
    for (int i = 0; i < n; ++i) {
        const double w = size(rng), h = size(rng);
        g.push_back({w / 2 + u(rng) * (img - w), h / 2 + u(rng) * (img - h), w, h});
    }
    return g;
}

}  // namespace

TEST(Anchors, CountsPerSource) {
    EXPECT_EQ(generate_anchors(96, 96, {{{8, {26.0}}}}).size(), 144u);
    EXPECT_EQ(generate_anchors(96, 96, {{{8, {26.0, 36.0}}}}).size(), 288u);
    const auto std_set = generate_anchors(96, 96, AnchorSpec::standard());
    EXPECT_EQ(std_set.size(), 24u * 24 * 2 + 12u * 12 * 2);
    EXPECT_EQ(std_set.source_begin, (std::vector<std::size_t>{0, 1152}));
    EXPECT_THROW(generate_anchors(90, 96, AnchorSpec::standard()), std::invalid_argument);
}

TEST(Anchors, CentresOnCellMidpoints) {
    const auto set = generate_anchors(16, 16, {{{8, {10.0, 20.0}}}});
    ASSERT_EQ(set.size(), 8u);
    EXPECT_EQ(set.boxes[0].cx, 4.0);
    EXPECT_EQ(set.boxes[1].w, 20.0);
    EXPECT_EQ(set.boxes[2].cx, 12.0);
    EXPECT_EQ(set.boxes[4].cy, 12.0);
}

TEST(Encoding, DecodeInvertsEncode) {
    std::mt19937_64 rng(9);
    const auto anchors = generate_anchors(96, 96, AnchorSpec::standard());
    std::uniform_int_distribution<std::size_t> pick(0, anchors.size() - 1);
    for (int i = 0; i < 500; ++i) {
        const auto gt = random_gts(rng, 1)[0];
        const auto& a = anchors.boxes[pick(rng)];
        const auto back = decode(encode(gt, a), a);
        EXPECT_NEAR(back.cx, gt.cx, 1e-5);
        EXPECT_NEAR(back.cy, gt.cy, 1e-5);
        EXPECT_NEAR(back.w, gt.w, 1e-5);
        EXPECT_NEAR(back.h, gt.h, 1e-5);
    }
}

TEST(Encoding, DecodeClampsHugeScale) {
    const Box a{10, 10, 4, 4};
    const auto b = decode({0, 0, 1e6, 1e6}, a);
    EXPECT_TRUE(std::isfinite(b.w));
    EXPECT_DOUBLE_EQ(b.w, 4 * std::exp(kMaxLogScale));
}

TEST(Matching, AgreesWithExhaustiveOracle) {
    std::mt19937_64 rng(17);
    const auto anchors = generate_anchors(96, 96, AnchorSpec::standard());
    for (int trial = 0; trial < 30; ++trial) {
        const auto gts = random_gts(rng, 1 + trial % 3);
        const auto m = match_anchors(anchors, gts);
        // Oracle: full IoU table, thresholds, then each GT's argmax anchor forced.
        const std::size_t A = anchors.size(), G = gts.size();
        std::vector<int> label(A, kNegative);
        for (std::size_t a = 0; a < A; ++a) {
            double best = -1;
            int arg = -1;
            for (std::size_t g = 0; g < G; ++g) {
                const double o = corner_iou(anchors.boxes[a], gts[g]);
                if (o > best) best = o, arg = static_cast<int>(g);
            }
            label[a] = best >= 0.5 ? arg : best >= 0.4 ? kIgnored : kNegative;
        }
        for (std::size_t g = 0; g < G; ++g) {
            std::size_t arg = 0;
            for (std::size_t a = 1; a < A; ++a)
                if (corner_iou(anchors.boxes[a], gts[g]) > corner_iou(anchors.boxes[arg], gts[g])) arg = a;
            label[arg] = static_cast<int>(g);
        }
        ASSERT_EQ(m.label, label) << "trial " << trial;
        std::size_t pos = 0;
        for (std::size_t a = 0; a < A; ++a)
            if (label[a] >= 0) {
                ++pos;
                const auto t = encode(gts[static_cast<std::size_t>(label[a])], anchors.boxes[a]);
                EXPECT_EQ(m.targets[a], t);
            } else {
                EXPECT_EQ(m.targets[a], Offsets{});
            }
        EXPECT_EQ(m.positives, pos);
        EXPECT_GE(pos, G);
    }
}

TEST(Matching, NoGroundTruthMeansAllNegative) {
    const auto anchors = generate_anchors(32, 32, {{{8, {12.0}}}});
    const auto m = match_anchors(anchors, {});
    EXPECT_EQ(m.positives, 0u);
    for (int l : m.label) EXPECT_EQ(l, kNegative);
    EXPECT_THROW(match_anchors(anchors, {}, 0.3, 0.4), std::invalid_argument);
}

TEST(HardNegatives, MatchSortOracle) {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> lab(-2, 1), level(0, 5);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t A = 40;
        MatchResult m;
        std::vector<double> loss(A);
        for (std::size_t a = 0; a < A; ++a) {
            m.label.push_back(lab(rng));
            loss[a] = level(rng) * 0.25;  // coarse levels produce ties
        }
        const std::size_t k = static_cast<std::size_t>(trial % 50);
        const auto got = select_hard_negatives(loss, m, k);
        std::vector<std::pair<double, std::size_t>> all;
        for (std::size_t a = 0; a < A; ++a)
            if (m.label[a] == kNegative) all.emplace_back(-loss[a], a);
        std::sort(all.begin(), all.end());
        std::vector<std::size_t> want;
        for (std::size_t i = 0; i < std::min(k, all.size()); ++i) want.push_back(all[i].second);
        EXPECT_EQ(got, want) << "trial " << trial;
    }
}

namespace {

double reference_loss(const std::vector<double>& z, const std::vector<double>& r, const std::vector<MatchResult>& ms,
                      std::size_t A) {
    double cls = 0, reg = 0;
    std::size_t npos = 0;
    for (std::size_t b = 0; b < ms.size(); ++b) {
        const auto& m = ms[b];
        std::vector<std::pair<double, std::size_t>> neg;
        std::size_t pos = 0;
        for (std::size_t a = 0; a < A; ++a) {
            const double z0 = z[(b * A + a) * 2], z1 = z[(b * A + a) * 2 + 1];
            const double p0 = std::exp(z0) / (std::exp(z0) + std::exp(z1));
            if (m.label[a] >= 0) {
                ++pos;
                cls += -std::log(1 - p0);
                for (std::size_t j = 0; j < 4; ++j) {
                    const double d = std::abs(r[(b * A + a) * 4 + j] - m.targets[a][j]);
                    reg += d < 1 ? 0.5 * d * d : d - 0.5;
                }
            } else if (m.label[a] == kNegative) {
                neg.emplace_back(-std::log(p0), a);
            }
        }
        std::sort(neg.begin(), neg.end(), [](auto& x, auto& y) { return x.first != y.first ? x.first > y.first : x.second < y.second; });
        const std::size_t k = std::min(neg.size(), 3 * std::max<std::size_t>(pos, 1));
        for (std::size_t i = 0; i < k; ++i) cls += neg[i].first;
        npos += pos;
    }
    return (cls + reg) / static_cast<double>(std::max<std::size_t>(npos, 1));
}

struct LossFixture {
    AnchorSet anchors = generate_anchors(32, 32, {{{8, {10.0, 16.0}}}});
    std::vector<MatchResult> matches;
    Tensor<double> logits, regs;

    LossFixture(std::uint64_t seed, bool with_lesions) {
        std::mt19937_64 rng(seed);
        for (int b = 0; b < 2; ++b) {
            std::vector<Box> gts;
            if (with_lesions) gts = random_gts(rng, 1 + b, 32);
            matches.push_back(match_anchors(anchors, gts));
        }
        const auto A = static_cast<std::int64_t>(anchors.size());
        logits = Tensor<double>::randn({2, A, 2}, rng);
        regs = Tensor<double>::randn({2, A, 4}, rng);
    }
};

}  // namespace

TEST(MultiboxLoss, MatchesReferenceValue) {
    for (std::uint64_t seed = 0; seed < 10; ++seed)
        for (bool lesions : {true, false}) {
            LossFixture f(seed, lesions);
            auto l = multibox_loss(f.logits, f.regs, f.matches);
            const double ref = reference_loss(f.logits.vec(), f.regs.vec(), f.matches, f.anchors.size());
            EXPECT_NEAR(l.total.item(), ref, 1e-12);
            EXPECT_NEAR(l.cls + l.reg, ref, 1e-12);
            EXPECT_GE(l.cls, 0);
            EXPECT_GE(l.reg, 0);
            if (!lesions) {
                EXPECT_EQ(l.reg, 0.0);
                EXPECT_EQ(l.positives, 0u);
                for (const auto& hn : l.hard_negatives) EXPECT_EQ(hn.size(), 3u);
            }
        }
}

TEST(MultiboxLoss, GradientsMatchFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        LossFixture f(seed + 100, true);
        std::vector<Tensor<double>> inputs{f.logits, f.regs};
        auto r = gradcheck(
            [&](std::vector<Tensor<double>>& in) { return multibox_loss(in[0], in[1], f.matches).total; }, inputs);
        EXPECT_LT(r.max_rel_error, 1e-6) << "seed " << seed;
    }
}

TEST(MultiboxLoss, FiniteForExtremeLogits) {
    LossFixture f(3, true);
    for (auto& v : f.logits.vec()) v *= 1e4;
    auto l = multibox_loss(f.logits, f.regs, f.matches);
    EXPECT_TRUE(std::isfinite(l.total.item()));
    EXPECT_GE(l.total.item(), 0);
}

TEST(MultiboxLoss, RejectsBadShapes) {
    LossFixture f(1, true);
    auto bad = Tensor<double>::zeros({2, 5, 2});
    EXPECT_THROW(multibox_loss(bad, f.regs, f.matches), std::invalid_argument);
    EXPECT_THROW(multibox_loss(f.logits, f.regs, {f.matches[0]}), std::invalid_argument);
}

namespace {

std::vector<Box> nms_oracle(const std::vector<Box>& boxes, double thr) {
    std::vector<std::size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return boxes[a].score > boxes[b].score; });
    std::vector<bool> suppressed(boxes.size(), false);
    std::vector<Box> out;
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (suppressed[order[i]]) continue;
        out.push_back(boxes[order[i]]);
        for (std::size_t j = i + 1; j < order.size(); ++j)
            if (corner_iou(boxes[order[i]], boxes[order[j]]) >= thr) suppressed[order[j]] = true;
    }
    return out;
}

}  // namespace

TEST(Nms, MatchesGreedyOracle) {
    std::mt19937_64 rng(21);
    std::uniform_int_distribution<int> level(1, 6);
    for (int trial = 0; trial < 100; ++trial) {
        auto boxes = random_gts(rng, 30, 48);
        for (auto& b : boxes) b.score = level(rng) / 6.0;
        const auto got = nms(boxes, 0.45);
        const auto want = nms_oracle(boxes, 0.45);
        ASSERT_EQ(got.size(), want.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            EXPECT_EQ(got[i].cx, want[i].cx);
            EXPECT_EQ(got[i].score, want[i].score);
        }
    }
}

TEST(Decode, ThresholdAndSuppression) {
    const auto anchors = generate_anchors(16, 16, {{{8, {8.0}}}});
    // Anchors 0 and 1 decode onto the same box; anchor 2 is below threshold.
    std::vector<float> logits{0, 3, 0, 2, 0, -3, 0, 1};
    std::vector<float> regs(16, 0);
    regs[4] = static_cast<float>(-8 / (8 * kCenterVariance));  // shift anchor 1 onto anchor 0
    const auto det = decode_detections(logits.data(), regs.data(), anchors);
    ASSERT_EQ(det.size(), 2u);
    EXPECT_NEAR(det[0].score, 1 / (1 + std::exp(-3.0)), 1e-12);
    EXPECT_EQ(det[0].cx, 4.0);
    EXPECT_EQ(det[1].cy, 12.0);
}
