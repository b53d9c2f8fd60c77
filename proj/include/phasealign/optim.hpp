#pragma once

#include <cmath>
#include <map>
#include <random>

#include "phasealign/tensor.hpp"

namespace phasealign {

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
    std::vector<T> momentum;
    T lr_scale = T(1);
};

/// Ordered, name-addressable collection of trainable tensors.
template <typename T>
class ParameterStore {
   public:
    Tensor<T>& add(const std::string& name, Tensor<T> tensor, T lr_scale = T(1)) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        if (!(lr_scale > T(0))) throw std::invalid_argument("lr_scale must be positive for " + name);
        tensor.set_requires_grad(true);
        index_[name] = params_.size();
        std::vector<T> mom(static_cast<std::size_t>(tensor.numel()), T(0));
        params_.push_back({name, std::move(tensor), std::move(mom), lr_scale});
        return params_.back().tensor;
    }

    /// Fan-in scaled uniform (He) initialisation for a weight of the given shape.
    template <typename Rng>
    Tensor<T>& add_weight(const std::string& name, Shape shape, Rng& rng, T lr_scale = T(1)) {
        std::int64_t fan_in = 1;
        for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
        const T bound = static_cast<T>(std::sqrt(6.0 / static_cast<double>(std::max<std::int64_t>(fan_in, 1))));
        return add(name, Tensor<T>::uniform(std::move(shape), -bound, bound, rng), lr_scale);
    }

    Tensor<T>& add_zeros(const std::string& name, Shape shape, T lr_scale = T(1)) {
        return add(name, Tensor<T>::zeros(std::move(shape)), lr_scale);
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Parameter<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return params_[it->second];
    }
    const Parameter<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return params_[it->second];
    }
    Tensor<T>& operator[](const std::string& name) { return at(name).tensor; }

    std::vector<Parameter<T>>& all() { return params_; }
    const std::vector<Parameter<T>>& all() const { return params_; }
    std::size_t size() const { return params_.size(); }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

   private:
    std::vector<Parameter<T>> params_;
    std::map<std::string, std::size_t> index_;
};

struct StepReport {
    std::size_t updated = 0;
    std::size_t skipped_missing_grad = 0;
};

/// SGD with heavy-ball momentum and L2 weight decay:
///   v <- momentum * v + grad + weight_decay * w
///   w <- w - lr * lr_scale * v
/// Gradients are cleared afterwards. Parameters without a gradient are skipped.
template <typename T>
StepReport sgd_step(std::vector<Parameter<T>>& params, T lr, T momentum, T weight_decay) {
    StepReport report;
    for (auto& p : params) {
        if (!p.tensor.has_grad()) {
            ++report.skipped_missing_grad;
            continue;
        }
        auto w = p.tensor.data();
        auto g = p.tensor.grad();
        const T step = lr * p.lr_scale;
        for (std::size_t i = 0; i < w.size(); ++i) {
            p.momentum[i] = momentum * p.momentum[i] + g[i] + weight_decay * w[i];
            w[i] -= step * p.momentum[i];
        }
        p.tensor.zero_grad();
        ++report.updated;
    }
    return report;
}

}  // namespace phasealign
