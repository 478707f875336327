#pragma once

// Dense N-D tensor with reverse-mode automatic differentiation.
//
// Every op that sees an input with requires_grad records its output node with a
// monotonically increasing sequence number and an adjoint closure. backward() gathers
// the nodes reachable from the scalar root, orders them by sequence number (the
// execution tape) and runs the adjoints in exact reverse.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "projnet/error.hpp"

namespace projnet {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {

inline std::atomic<bool>& finite_checks_flag() {
#ifdef NDEBUG
    static std::atomic<bool> flag{false};
#else
    static std::atomic<bool> flag{true};
#endif
    return flag;
}

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

inline std::uint64_t next_sequence() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::span<T> ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T{0});
        return grad;
    }
};

} // namespace detail

/// Debug-mode check that every forward op produces finite values. Defaults to on unless
/// NDEBUG is defined.
inline void set_finite_checks(bool on) { detail::finite_checks_flag() = on; }
inline bool finite_checks() { return detail::finite_checks_flag(); }

/// Disables tape recording on the current thread for its lifetime (inference).
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <class T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;

    /// Zero-filled.
    explicit Tensor(Shape shape) : node_(std::make_shared<detail::Node<T>>()) {
        node_->data.assign(numel(shape), T{0});
        node_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>()) {
        if (numel(shape) != data.size())
            throw ShapeError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                             shape_string(shape));
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
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.node_->data.begin(), t.node_->data.end(), value);
        return t;
    }

    static Tensor from_node(NodePtr node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->data.size(); }

    std::span<const T> data() const { return node_->data; }
    /// In-place access for leaves (parameters, optimizer updates, test harnesses).
    std::span<T> mutable_data() { return node_->data; }
    T operator[](std::size_t i) const { return node_->data[i]; }

    T item() const {
        if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T{0}); }

    /// Copy of the values without history.
    Tensor detach() const { return Tensor(shape(), node_->data, false); }

    const NodePtr& node() const { return node_; }

    /// Accumulates d(this)/d(leaf) into every reachable leaf with requires_grad.
    void backward() const {
        if (!defined() || size() != 1)
            throw ShapeError("backward() needs a scalar root, got " + (defined() ? shape_string(shape()) : "undefined"));
        if (!node_->requires_grad) return;

        std::vector<detail::Node<T>*> tape;
        std::unordered_set<detail::Node<T>*> seen;
        std::vector<detail::Node<T>*> stack{node_.get()};
        while (!stack.empty()) {
            auto* n = stack.back();
            stack.pop_back();
            if (!seen.insert(n).second) continue;
            tape.push_back(n);
            for (const auto& p : n->parents)
                if (p->requires_grad) stack.push_back(p.get());
        }
        std::sort(tape.begin(), tape.end(), [](auto* a, auto* b) { return a->seq < b->seq; });

        node_->ensure_grad()[0] += T{1};
        for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
            auto* n = *it;
            if (n->backward && n->grad.size() == n->data.size()) n->backward(*n);
        }
    }

private:
    NodePtr node_;
};

/// Records the result of an op. `backward` reads `self.grad` and accumulates into the
/// parents (same order as `inputs`) that require gradients.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(detail::Node<T>&)> backward, const char* op) {
    if (finite_checks()) {
        for (const T& v : data)
            if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    bool any = false;
    if (detail::grad_mode())
        for (const auto* in : inputs) any = any || (in && in->requires_grad());
    if (any) {
        node->requires_grad = true;
        node->seq = detail::next_sequence();
        for (const auto* in : inputs) node->parents.push_back(in && in->defined() ? in->node() : nullptr);
        node->backward = std::move(backward);
        // Null placeholders keep parent positions stable; drop them from traversal via a dummy.
        for (auto& p : node->parents)
            if (!p) p = std::make_shared<detail::Node<T>>();
    }
    return Tensor<T>::from_node(std::move(node));
}

/// Gradient buffer of parent `i` when it participates in differentiation, else empty.
template <class T>
std::span<T> parent_grad(detail::Node<T>& self, std::size_t i) {
    auto& p = self.parents[i];
    if (!p || !p->requires_grad) return {};
    return p->ensure_grad();
}

} // namespace projnet
