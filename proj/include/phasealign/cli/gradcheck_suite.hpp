#pragma once

#include <chrono>
#include <iomanip>
#include <sstream>

#include "phasealign/deform_conv.hpp"
#include "phasealign/detector/loss.hpp"
#include "phasealign/gradcheck.hpp"
#include "phasealign/nn/model.hpp"

namespace phasealign::cli {

inline constexpr double kGradcheckTolerance = 1e-4;

struct GradcheckRow {
    std::string name;
    double max_rel_error = 0;
    std::size_t checked = 0;
    bool passed = false;
};

struct GradcheckTable {
    std::vector<GradcheckRow> rows;
    double seconds = 0;

    bool passed() const {
        return std::all_of(rows.begin(), rows.end(), [](const GradcheckRow& r) { return r.passed; });
    }
    double max_error() const {
        double m = 0;
        for (const auto& r : rows) m = std::max(m, r.max_rel_error);
        return m;
    }
};

namespace detail {

using TD = Tensor<double>;

inline TD weighted_sum(const TD& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
    return sum(mul(y, TD::uniform(y.shape(), -1.0, 1.0, rng)));
}

// Keeps fractional parts away from lattice lines where bilinear weights have kinks.
inline TD off_lattice(Shape shape, double lo, double hi, std::mt19937_64& rng) {
    auto t = TD::uniform(std::move(shape), lo, hi, rng);
    for (auto& v : t.vec()) {
        const double f = v - std::floor(v);
        if (f < 0.1) v += 0.1;
        if (f > 0.9) v -= 0.1;
    }
    return t;
}

inline void fill_uniform(TD& t, double lo, double hi, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : t.vec()) v = u(rng);
}

using Builder = std::function<TD(std::vector<TD>&)>;

struct Case {
    std::string name;
    std::function<std::pair<std::vector<TD>, Builder>(std::mt19937_64&, std::uint64_t)> make;
};

inline std::vector<Case> gradcheck_cases() {
    std::vector<Case> cases;
    auto op = [&](std::string name, std::function<std::vector<TD>(std::mt19937_64&)> inputs,
                  std::function<TD(std::vector<TD>&)> fn) {
        cases.push_back({std::move(name), [inputs, fn](std::mt19937_64& rng, std::uint64_t seed) {
                             return std::pair<std::vector<TD>, Builder>{
                                 inputs(rng), [fn, seed](std::vector<TD>& v) { return weighted_sum(fn(v), seed); }};
                         }});
    };
    op("add", [](auto& r) { return std::vector<TD>{TD::randn({3, 4}, r), TD::randn({3, 4}, r)}; },
       [](auto& v) { return add(v[0], v[1]); });
    op("sub", [](auto& r) { return std::vector<TD>{TD::randn({5}, r), TD::randn({5}, r)}; },
       [](auto& v) { return sub(v[0], v[1]); });
    op("mul", [](auto& r) { return std::vector<TD>{TD::randn({6}, r), TD::randn({6}, r)}; },
       [](auto& v) { return mul(v[0], v[1]); });
    op("scale_by", [](auto& r) { return std::vector<TD>{TD::randn({6}, r), TD::randn({1}, r)}; },
       [](auto& v) { return scale_by(v[0], v[1]); });
    op("affine", [](auto& r) { return std::vector<TD>{TD::randn({6}, r)}; },
       [](auto& v) { return affine(v[0], -1.5, 0.25); });
    op("relu", [](auto& r) { return std::vector<TD>{TD::randn({20}, r)}; }, [](auto& v) { return relu(v[0]); });
    op("mean", [](auto& r) { return std::vector<TD>{TD::randn({2, 5}, r)}; }, [](auto& v) { return mean(v[0]); });
    op("concat_slice", [](auto& r) { return std::vector<TD>{TD::randn({2, 3, 2}, r), TD::randn({2, 1, 2}, r)}; },
       [](auto& v) { return slice(concat<double>({v[0], v[1]}, 1), 1, 1, 3); });
    op("flatten_head", [](auto& r) { return std::vector<TD>{TD::randn({2, 6, 2, 3}, r)}; },
       [](auto& v) { return flatten_head(v[0], 3); });
    op("matmul", [](auto& r) { return std::vector<TD>{TD::randn({3, 4}, r), TD::randn({4, 2}, r)}; },
       [](auto& v) { return matmul(v[0], v[1]); });
    op("bmm", [](auto& r) { return std::vector<TD>{TD::randn({2, 4, 3}, r), TD::randn({2, 5, 3}, r)}; },
       [](auto& v) { return bmm(v[0], v[1], false, true); });
    op("softmax", [](auto& r) { return std::vector<TD>{TD::randn({3, 6}, r)}; }, [](auto& v) { return softmax(v[0], 1); });
    op("avg_pool2d", [](auto& r) { return std::vector<TD>{TD::randn({1, 2, 5, 6}, r)}; },
       [](auto& v) { return avg_pool2d(v[0], 2); });
    op("conv2d_grouped_strided",
       [](auto& r) { return std::vector<TD>{TD::randn({2, 4, 5, 5}, r), TD::randn({6, 2, 3, 3}, r), TD::randn({6}, r)}; },
       [](auto& v) { return conv2d(v[0], v[1], v[2], {.stride = 2, .padding = 1, .groups = 2}); });
    op("conv2d_pointwise", [](auto& r) { return std::vector<TD>{TD::randn({1, 4, 3, 3}, r), TD::randn({5, 4, 1, 1}, r)}; },
       [](auto& v) { return conv2d(v[0], v[1]); });
    op("bilinear_sample", [](auto& r) { return std::vector<TD>{TD::randn({2, 5, 5}, r), off_lattice({7, 2}, -0.8, 4.8, r)}; },
       [](auto& v) { return bilinear_sample(v[0], v[1]); });
    op("deform_conv2d",
       [](auto& r) {
           return std::vector<TD>{TD::randn({1, 4, 5, 5}, r), off_lattice({1, 2 * 9 * 2, 5, 5}, -1.5, 1.5, r),
                                  TD::randn({4, 2, 3, 3}, r), TD::randn({4}, r)};
       },
       [](auto& v) { return deform_conv2d(v[0], v[1], v[2], v[3], {.groups = 2, .offset_groups = 2}); });

    // Modules: parameters become gradcheck inputs; sigma and offsets are moved off their
    // zero initialisation so every path carries gradient.
    auto module = [&](std::string name, std::function<std::pair<std::vector<TD>, Builder>(std::mt19937_64&, std::uint64_t)> m) {
        cases.push_back({std::move(name), std::move(m)});
    };
    for (int pool : {1, 2})
        module("self_attention_D" + std::to_string(pool), [pool](std::mt19937_64& rng, std::uint64_t seed) {
            auto store = std::make_shared<ParameterStore<double>>();
            auto sa = std::make_shared<nn::SelfAttention<double>>(*store, "sa", nn::AttentionConfig::standard(8, pool), rng);
            (*store)["sa.sigma"].vec()[0] = 0.6;
            std::vector<TD> in{TD::randn({1, 8, 4, 4}, rng)};
            for (auto& p : store->all()) in.push_back(p.tensor);
            return std::pair<std::vector<TD>, Builder>{
                in, [store, sa, seed](std::vector<TD>& v) { return weighted_sum(sa->forward(v[0]).y, seed); }};
        });
    module("self_attention_grouped", [](std::mt19937_64& rng, std::uint64_t seed) {
        auto store = std::make_shared<ParameterStore<double>>();
        auto sa = std::make_shared<nn::SelfAttention<double>>(*store, "sa", nn::AttentionConfig::standard(16, 1, 2), rng);
        (*store)["sa.sigma"].vec()[0] = -0.4;
        std::vector<TD> in{TD::randn({1, 16, 3, 3}, rng)};
        for (auto& p : store->all()) in.push_back(p.tensor);
        return std::pair<std::vector<TD>, Builder>{
            in, [store, sa, seed](std::vector<TD>& v) { return weighted_sum(sa->forward(v[0]).y, seed); }};
    });
    module("phasewise_deform_guided", [](std::mt19937_64& rng, std::uint64_t seed) {
        auto store = std::make_shared<ParameterStore<double>>();
        auto dc = std::make_shared<nn::PhasewiseDeformConv<double>>(*store, "dc", nn::DeformConfig{4, 4, 4, 2, false, 3}, rng);
        fill_uniform(dc->offset_weight(), -0.02, 0.02, rng);
        fill_uniform(dc->offset_bias(), 0.3, 0.4, rng);
        std::vector<TD> in{TD::uniform({1, 4, 4, 4}, -1.0, 1.0, rng), TD::uniform({1, 4, 4, 4}, -1.0, 1.0, rng)};
        for (auto& p : store->all()) in.push_back(p.tensor);
        return std::pair<std::vector<TD>, Builder>{in, [store, dc, seed](std::vector<TD>& v) {
                                                       return weighted_sum(
                                                           dc->forward(v[0], concat(std::vector<TD>{v[0], v[1]}, 1)).y, seed);
                                                   }};
    });
    module("attention_guided_alignment", [](std::mt19937_64& rng, std::uint64_t seed) {
        auto store = std::make_shared<ParameterStore<double>>();
        auto sa = std::make_shared<nn::SelfAttention<double>>(*store, "sa", nn::AttentionConfig::standard(8, 1), rng);
        auto dc = std::make_shared<nn::PhasewiseDeformConv<double>>(*store, "dc", nn::DeformConfig{8, 8, 8, 4, false, 3}, rng);
        (*store)["sa.sigma"].vec()[0] = 0.5;
        fill_uniform(dc->offset_weight(), -0.1 / 576, 0.1 / 576, rng);
        fill_uniform(dc->offset_bias(), 0.3, 0.4, rng);
        std::vector<TD> in{TD::uniform({1, 8, 3, 3}, -1.0, 1.0, rng)};
        for (auto& p : store->all()) in.push_back(p.tensor);
        return std::pair<std::vector<TD>, Builder>{in, [store, sa, dc, seed](std::vector<TD>& v) {
                                                       auto a = sa->forward(v[0]);
                                                       return weighted_sum(
                                                           dc->forward(a.y, concat(std::vector<TD>{a.y, a.state.gated}, 1)).y,
                                                           seed);
                                                   }};
    });
    module("multibox_loss", [](std::mt19937_64& rng, std::uint64_t) {
        auto anchors = generate_anchors(32, 32, {{{8, {10.0, 16.0}}}});
        std::uniform_real_distribution<double> u(6, 26), s(6, 14);
        std::vector<MatchResult> matches;
        for (int b = 0; b < 2; ++b) {
            std::vector<Box> gts;
            for (int k = 0; k <= b; ++k) gts.push_back({u(rng), u(rng), s(rng), s(rng)});
            matches.push_back(match_anchors(anchors, gts));
        }
        const auto A = static_cast<std::int64_t>(anchors.size());
        std::vector<TD> in{TD::randn({2, A, 2}, rng), TD::randn({2, A, 4}, rng)};
        return std::pair<std::vector<TD>, Builder>{
            in, [matches](std::vector<TD>& v) { return multibox_loss(v[0], v[1], matches).total; }};
    });
    return cases;
}

}  // namespace detail

/// Runs every case for `seeds` seeds and reports the worst relative error per case.
/// `inject_fault` appends a deliberately wrong-signed op as a negative control.
inline GradcheckTable run_gradcheck_suite(int seeds = 3, bool inject_fault = false) {
    const auto t0 = std::chrono::steady_clock::now();
    GradcheckTable table;
    auto cases = detail::gradcheck_cases();
    if (inject_fault)
        cases.push_back({"injected_wrong_sign", [](std::mt19937_64& rng, std::uint64_t) {
                             std::vector<detail::TD> in{detail::TD::randn({4}, rng)};
                             detail::Builder fn = [](std::vector<detail::TD>& v) {
                                 auto flipped = detail::TD::make_result(
                                     v[0].shape(), v[0].vec(), "wrong_sign", {v[0]}, [](phasealign::detail::Node<double>& n) {
                                         auto& g = n.inputs[0]->ensure_grad();
                                         for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
                                     });
                                 return sum(flipped);
                             };
                             return std::pair<std::vector<detail::TD>, detail::Builder>{in, fn};
                         }});
    for (const auto& c : cases) {
        GradcheckRow row{c.name, 0, 0, false};
        for (int s = 0; s < seeds; ++s) {
            std::mt19937_64 rng(static_cast<std::uint64_t>(s) * 7919 + 17);
            auto [inputs, fn] = c.make(rng, static_cast<std::uint64_t>(s));
            const auto r = gradcheck(fn, inputs);
            row.max_rel_error = std::max(row.max_rel_error, r.max_rel_error);
            row.checked += r.checked;
        }
        row.passed = row.max_rel_error < kGradcheckTolerance;
        table.rows.push_back(row);
    }
    table.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return table;
}

inline std::string to_csv(const GradcheckTable& t) {
    std::ostringstream os;
    os << "op,max_rel_error,checked,status\n";
    for (const auto& r : t.rows)
        os << r.name << ',' << std::scientific << std::setprecision(3) << r.max_rel_error << std::defaultfloat << ','
           << r.checked << ',' << (r.passed ? "pass" : "FAIL") << '\n';
    return os.str();
}

}  // namespace phasealign::cli
