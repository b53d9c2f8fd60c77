#pragma once

#include <cmath>
#include <functional>

#include "phasealign/tensor.hpp"

namespace phasealign {

struct GradcheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

/// Compares reverse-mode gradients of a scalar function against central differences.
///
/// `fn` builds a one-element loss from `inputs`. Every input is perturbed in place by
/// +-eps; the relative error per element is |a - n| / max(1e-8, |a| + |n|).
inline GradcheckResult gradcheck(const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& fn,
                                 std::vector<Tensor<double>>& inputs, double eps = 1e-4) {
    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.zero_grad();
    }
    auto loss = fn(inputs);
    backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& in : inputs) {
        analytic.emplace_back(in.has_grad() ? std::vector<double>(in.grad().begin(), in.grad().end())
                                            : std::vector<double>(static_cast<std::size_t>(in.numel()), 0.0));
    }

    GradcheckResult result;
    NoGradGuard guard;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto values = inputs[k].data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double orig = values[i];
            values[i] = orig + eps;
            const double up = fn(inputs).item();
            values[i] = orig - eps;
            const double down = fn(inputs).item();
            values[i] = orig;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[k][i];
            const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            result.max_rel_error = std::max(result.max_rel_error, rel);
            ++result.checked;
        }
    }
    for (auto& in : inputs) in.zero_grad();
    return result;
}

}  // namespace phasealign
