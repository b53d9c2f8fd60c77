#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace phasealign {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

/// Thrown for any shape or argument contract violation inside the engine.
class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

inline int& no_grad_depth() {
    thread_local int depth = 0;
    return depth;
}

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the inputs' grads.
    std::function<void(Node&)> backward;

    std::vector<T>& ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        return grad;
    }
};

}  // namespace detail

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
   public:
    NoGradGuard() { ++detail::no_grad_depth(); }
    ~NoGradGuard() { --detail::no_grad_depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth() == 0; }

/// Dense row-major tensor handle. Copies share storage; use clone() for a deep copy.
template <typename T>
class Tensor {
   public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;

    explicit Tensor(Shape shape) : node_(std::make_shared<detail::Node<T>>()) {
        for (auto d : shape)
            if (d < 0) throw ShapeError("negative extent in shape " + phasealign::to_string(shape));
        node_->data.assign(static_cast<std::size_t>(phasealign::numel(shape)), T(0));
        node_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>()) {
        if (static_cast<std::int64_t>(data.size()) != phasealign::numel(shape))
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                             phasealign::to_string(shape));
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t(std::move(shape));
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        auto t = zeros(std::move(shape), requires_grad);
        std::fill(t.node_->data.begin(), t.node_->data.end(), value);
        return t;
    }

    template <typename Rng>
    static Tensor uniform(Shape shape, T lo, T hi, Rng& rng, bool requires_grad = false) {
        auto t = zeros(std::move(shape), requires_grad);
        std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
        for (auto& v : t.node_->data) v = static_cast<T>(dist(rng));
        return t;
    }

    template <typename Rng>
    static Tensor randn(Shape shape, Rng& rng, bool requires_grad = false) {
        auto t = zeros(std::move(shape), requires_grad);
        std::normal_distribution<double> dist(0.0, 1.0);
        for (auto& v : t.node_->data) v = static_cast<T>(dist(rng));
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node().shape; }
    std::int64_t dim(std::size_t i) const {
        if (i >= shape().size()) throw ShapeError("dimension index out of range for " + phasealign::to_string(shape()));
        return shape()[i];
    }
    std::size_t rank() const { return shape().size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(node().data.size()); }

    std::span<T> data() { return node().data; }
    std::span<const T> data() const { return node().data; }
    std::vector<T>& vec() { return node().data; }
    const std::vector<T>& vec() const { return node().data; }

    bool has_grad() const { return node().grad.size() == node().data.size() && !node().data.empty(); }
    std::span<T> grad() { return node().ensure_grad(); }
    std::span<const T> grad() const { return node().grad; }
    void zero_grad() { node().grad.clear(); }

    bool requires_grad() const { return node().requires_grad; }
    void set_requires_grad(bool flag) { node().requires_grad = flag; }
    const char* op_name() const { return node().op; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + phasealign::to_string(shape()));
        return node().data[0];
    }
    T operator[](std::int64_t i) const { return node().data[static_cast<std::size_t>(i)]; }

    Tensor clone() const {
        Tensor t(shape(), node().data, false);
        return t;
    }

    /// Value copy with no graph history.
    Tensor detach() const {
        Tensor t;
        t.node_ = std::make_shared<detail::Node<T>>();
        t.node_->shape = node().shape;
        t.node_->data = node().data;
        return t;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(node().data.begin(), node().data.end());
        return Tensor<U>(shape(), std::move(out));
    }

    NodePtr node_ptr() const { return node_; }
    detail::Node<T>& node() const {
        if (!node_) throw std::logic_error("use of undefined tensor");
        return *node_;
    }

    /// Builds a result tensor and wires its backward closure when any input tracks gradients.
    static Tensor make_result(Shape shape, std::vector<T> data, const char* op, std::vector<Tensor> inputs,
                              std::function<void(detail::Node<T>&)> backward) {
        Tensor out(std::move(shape), std::move(data));
        out.node_->op = op;
        if (!grad_enabled()) return out;
        bool track = false;
        for (const auto& in : inputs) track = track || (in.defined() && in.requires_grad());
        if (!track) return out;
        out.node_->requires_grad = true;
        for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
        out.node_->backward = std::move(backward);
        return out;
    }

   private:
    NodePtr node_;
};

/// Reverse-mode sweep from a scalar loss. Accumulates into every requires_grad tensor
/// reachable from `loss`, then drops the recorded graph.
template <typename T>
void backward(Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw ShapeError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    using NodeT = detail::Node<T>;
    // Iterative post-order DFS gives a topological order of the recorded ops.
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> seen;
    std::vector<std::pair<NodeT*, std::size_t>> stack{{loss.node_ptr().get(), 0}};
    seen.insert(stack.back().first);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            NodeT* child = node->inputs[next++].get();
            if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node().ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT* node = *it;
        if (!node->backward) continue;
        node->ensure_grad();
        node->backward(*node);
    }
    for (NodeT* node : order) {
        if (!node->backward) continue;
        node->backward = nullptr;
        node->inputs.clear();
    }
}

namespace detail {

/// Input `i` of a recorded op, or nullptr when it does not take gradients.
template <typename T>
inline Node<T>* grad_target(Node<T>& n, std::size_t i) {
    if (i >= n.inputs.size() || !n.inputs[i] || !n.inputs[i]->requires_grad) return nullptr;
    return n.inputs[i].get();
}

}  // namespace detail

}  // namespace phasealign
