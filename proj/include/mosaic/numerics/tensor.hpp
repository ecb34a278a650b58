#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mosaic/error.hpp"

namespace mosaic {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads self.grad and accumulates into self.parents[i]->grad.
    std::function<void(Node&)> backward;

    std::vector<T>& ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        return grad;
    }
};

/// Dense row-major array with optional participation in reverse-mode
/// differentiation. A Tensor is a shared handle: copies alias the same
/// storage and graph node, like a framework tensor.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node<T>>()) {
        node_->data.assign(shape_numel(shape), fill);
        node_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<Node<T>>()) {
        require(shape_numel(shape) == data.size(),
                [&] { return "tensor data length " + std::to_string(data.size()) + " does not match shape " +
                    shape_str(shape); });
        node_->shape = std::move(shape);
        node_->data = std::move(data);
    }

    static Tensor from_node(std::shared_ptr<Node<T>> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    const std::vector<T>& vec() const { return node_->data; }

    T& operator[](std::size_t i) { return node_->data[i]; }
    const T& operator[](std::size_t i) const { return node_->data[i]; }

    T item() const {
        require(numel() == 1, [&] { return "item() on tensor of shape " + shape_str(shape()); });
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        node_->requires_grad = on;
        return *this;
    }

    /// Gradient accumulator, allocated (zero) on first access.
    std::span<T> grad() { return node_->ensure_grad(); }
    std::span<const T> grad() const { return node_->ensure_grad(); }
    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

    /// A fresh leaf holding a copy of the values.
    Tensor detach() const { return Tensor(shape(), node_->data); }

    Tensor reshape(Shape shape) const;

    const char* op() const { return node_->op; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

namespace detail {

/// Builds the output node of an operation. The backward closure is kept only
/// when grad mode is on and some input participates in differentiation.
template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                      const char* op, Backward&& backward) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        for (const auto& in : inputs) node->parents.push_back(in.node());
        node->backward = std::forward<Backward>(backward);
    }
    return Tensor<T>::from_node(std::move(node));
}

}  // namespace detail

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape new_shape) const {
    require(shape_numel(new_shape) == numel(),
            [&] { return "cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape); });
    return detail::make_result<T>(std::move(new_shape), node_->data, {*this}, "reshape",
                                  [](Node<T>& self) {
                                      auto& g = self.parents[0]->ensure_grad();
                                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  });
}

/// Reverse topological record of the operations reachable from a root.
/// Replaying it in order runs every adjoint after all of its consumers.
template <typename T>
class Tape {
public:
    static Tape record(const Tensor<T>& root) {
        Tape tape;
        std::unordered_set<const Node<T>*> seen;
        // Iterative post-order DFS; parents visited in declaration order so the
        // resulting order (and hence the summation order) is fixed.
        std::vector<std::pair<Node<T>*, std::size_t>> stack;
        if (root.requires_grad()) stack.emplace_back(root.node().get(), 0);
        std::vector<Node<T>*> post;
        if (!stack.empty()) seen.insert(root.node().get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Node<T>* p = node->parents[next++].get();
                if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                post.push_back(node);
                stack.pop_back();
            }
        }
        tape.order_.assign(post.rbegin(), post.rend());
        return tape;
    }

    std::size_t size() const { return order_.size(); }
    bool empty() const { return order_.empty(); }

    /// Zeroes every gradient on the tape, seeds the root with 1 and runs the
    /// adjoints.
    void backward() {
        if (order_.empty()) return;
        for (Node<T>* n : order_) {
            n->ensure_grad();
            std::fill(n->grad.begin(), n->grad.end(), T(0));
        }
        order_.front()->grad[0] = T(1);
        for (Node<T>* n : order_) {
            if (n->backward) n->backward(*n);
        }
    }

private:
    std::vector<Node<T>*> order_;
};

enum class GradStatus {
    ok,
    /// The loss does not depend on anything that requires a gradient; no
    /// gradient was touched.
    detached,
};

/// Populates `.grad()` of every tensor reachable from `loss` with
/// d loss / d tensor. Gradients of reachable tensors are overwritten, not
/// accumulated.
template <typename T>
GradStatus grad(const Tensor<T>& loss) {
    require(loss.numel() == 1, [&] { return "grad() needs a scalar loss, got shape " + shape_str(loss.shape()); });
    auto tape = Tape<T>::record(loss);
    if (tape.empty()) return GradStatus::detached;
    tape.backward();
    return GradStatus::ok;
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
    std::vector<To> out(t.data().begin(), t.data().end());
    return Tensor<To>(t.shape(), std::move(out));
}

}  // namespace mosaic
