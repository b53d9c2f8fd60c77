#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>

#include "phasealign/detector/matching.hpp"
#include "phasealign/ops.hpp"

namespace phasealign {

template <typename T>
struct MultiboxLoss {
    Tensor<T> total;  // scalar, (cls + reg) / max(1, positives)
    double cls = 0;   // normalised classification part
    double reg = 0;   // normalised localisation part
    std::size_t positives = 0;
    std::vector<std::vector<std::size_t>> hard_negatives;  // per image, by descending loss
};

namespace detail {

inline double smooth_l1(double d) { return std::abs(d) < 1 ? 0.5 * d * d : std::abs(d) - 0.5; }
inline double smooth_l1_grad(double d) { return std::abs(d) < 1 ? d : (d > 0 ? 1.0 : -1.0); }

/// -log softmax(z)[cls] for two logits.
inline double two_class_ce(double z0, double z1, int cls) {
    const double m = std::max(z0, z1);
    const double lse = m + std::log(std::exp(z0 - m) + std::exp(z1 - m));
    return lse - (cls ? z1 : z0);
}

}  // namespace detail

/// Negatives of one image ranked by background cross-entropy, highest first; ties by
/// anchor index. Positives and ignored anchors never qualify.
inline std::vector<std::size_t> select_hard_negatives(const std::vector<double>& background_loss,
                                                      const MatchResult& match, std::size_t k) {
    std::vector<std::size_t> neg;
    for (std::size_t a = 0; a < match.label.size(); ++a)
        if (match.label[a] == kNegative) neg.push_back(a);
    k = std::min(k, neg.size());
    std::partial_sort(neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(k), neg.end(),
                      [&](std::size_t a, std::size_t b) {
                          return background_loss[a] != background_loss[b] ? background_loss[a] > background_loss[b] : a < b;
                      });
    neg.resize(k);
    return neg;
}

/// Softmax cross-entropy on positives plus the neg_ratio*|pos| hardest negatives of each
/// image (neg_ratio when the image has no positives), smooth-L1 on positive offsets.
/// Both terms are divided by max(1, total positives).
template <typename T>
MultiboxLoss<T> multibox_loss(const Tensor<T>& logits, const Tensor<T>& regressions,
                              const std::vector<MatchResult>& matches, int neg_ratio = 3) {
    detail::require(logits.rank() == 3 && logits.dim(2) == 2, "multibox_loss: logits must be [B, A, 2], got " +
                                                                  to_string(logits.shape()));
    const std::int64_t B = logits.dim(0), A = logits.dim(1);
    detail::require(regressions.shape() == Shape{B, A, 4}, "multibox_loss: regressions must be [B, A, 4], got " +
                                                               to_string(regressions.shape()));
    detail::require(static_cast<std::int64_t>(matches.size()) == B, "multibox_loss: one match result per image needed");

    MultiboxLoss<T> out;
    const auto& z = logits.vec();
    const auto& r = regressions.vec();
    // Per anchor: weight on the classification term (0 or 1) and its class.
    std::vector<std::uint8_t> use(static_cast<std::size_t>(B * A), 0);
    for (std::int64_t b = 0; b < B; ++b) {
        const auto& m = matches[static_cast<std::size_t>(b)];
        detail::require(static_cast<std::int64_t>(m.label.size()) == A, "multibox_loss: match size differs from anchor count");
        std::vector<double> bg(static_cast<std::size_t>(A));
        for (std::int64_t a = 0; a < A; ++a) {
            const auto i = static_cast<std::size_t>((b * A + a) * 2);
            bg[static_cast<std::size_t>(a)] = detail::two_class_ce(z[i], z[i + 1], 0);
            if (m.label[static_cast<std::size_t>(a)] >= 0) use[static_cast<std::size_t>(b * A + a)] = 1;
        }
        const std::size_t k = static_cast<std::size_t>(neg_ratio) * std::max<std::size_t>(m.positives, 1);
        out.hard_negatives.push_back(select_hard_negatives(bg, m, k));
        for (auto a : out.hard_negatives.back()) use[static_cast<std::size_t>(b * A) + a] = 1;
        out.positives += m.positives;
    }
    const double norm = static_cast<double>(std::max<std::size_t>(out.positives, 1));

    double cls = 0, reg = 0;
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t a = 0; a < A; ++a) {
            const auto idx = static_cast<std::size_t>(b * A + a);
            if (!use[idx]) continue;
            const int lab = matches[static_cast<std::size_t>(b)].label[static_cast<std::size_t>(a)];
            cls += detail::two_class_ce(z[2 * idx], z[2 * idx + 1], lab >= 0);
            if (lab >= 0) {
                const auto& t = matches[static_cast<std::size_t>(b)].targets[static_cast<std::size_t>(a)];
                for (int j = 0; j < 4; ++j) reg += detail::smooth_l1(r[4 * idx + static_cast<std::size_t>(j)] - t[static_cast<std::size_t>(j)]);
            }
        }
    out.cls = cls / norm;
    out.reg = reg / norm;

    auto labels = std::make_shared<std::vector<int>>(static_cast<std::size_t>(B * A), kNegative);
    auto targets = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B * A * 4), 0.0);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t a = 0; a < A; ++a) {
            const auto idx = static_cast<std::size_t>(b * A + a);
            const auto& m = matches[static_cast<std::size_t>(b)];
            (*labels)[idx] = use[idx] ? (m.label[static_cast<std::size_t>(a)] >= 0 ? 1 : 0) : -1;
            for (int j = 0; j < 4; ++j) (*targets)[4 * idx + static_cast<std::size_t>(j)] = m.targets[static_cast<std::size_t>(a)][static_cast<std::size_t>(j)];
        }
    out.total = Tensor<T>::make_result(
        {1}, {static_cast<T>(out.cls + out.reg)}, "multibox_loss", {logits, regressions},
        [labels, targets, norm](detail::Node<T>& n) {
            const T g = n.grad[0] / static_cast<T>(norm);
            const auto& z = n.inputs[0]->data;
            const auto& r = n.inputs[1]->data;
            auto* zin = detail::grad_target(n, 0);
            auto* rin = detail::grad_target(n, 1);
            for (std::size_t idx = 0; idx < labels->size(); ++idx) {
                const int lab = (*labels)[idx];
                if (lab < 0) continue;
                if (zin) {
                    auto& gz = zin->ensure_grad();
                    const double m = std::max(z[2 * idx], z[2 * idx + 1]);
                    const double e0 = std::exp(z[2 * idx] - m), e1 = std::exp(z[2 * idx + 1] - m);
                    const double p1 = e1 / (e0 + e1);
                    gz[2 * idx] += g * static_cast<T>((1 - p1) - (lab == 0));
                    gz[2 * idx + 1] += g * static_cast<T>(p1 - (lab == 1));
                }
                if (rin && lab == 1) {
                    auto& gr = rin->ensure_grad();
                    for (std::size_t j = 0; j < 4; ++j)
                        gr[4 * idx + j] += g * static_cast<T>(detail::smooth_l1_grad(r[4 * idx + j] - (*targets)[4 * idx + j]));
                }
            }
        });
    return out;
}

}  // namespace phasealign
