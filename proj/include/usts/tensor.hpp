#pragma once

// Dense row-major arrays with a dynamic reverse-mode tape.
//
// Every op result records its parents and a closure that pushes the result's
// gradient into them. Values are never mutated after construction; only the
// gradient buffers accumulate. A graph is owned by the tensors that reference
// it and dies with them.
//
// Determinism: all kernels are single-threaded and iterate in a fixed order,
// so results are bit-identical across runs on the same build.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "usts/error.hpp"

namespace usts {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording for its lifetime (evaluation, optimizer updates).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node<T>>()) {
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                                 std::to_string(values.size()) + " values");
        }
        node_->shape = std::move(shape);
        node_->value = std::move(values);
    }

    static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
    static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
    static Tensor full(Shape shape, T v) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, v));
    }
    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    /// Result of an op. Records the tape entry only when some parent needs a
    /// gradient and recording is enabled.
    static Tensor make_result(Shape shape, std::vector<T> values,
                              std::vector<Tensor> parents,
                              std::function<void(Node<T>&)> backward_fn) {
        Tensor out(std::move(shape), std::move(values));
        if (!grad_enabled()) return out;
        bool needs = false;
        for (const auto& p : parents) needs = needs || p.requires_grad();
        if (!needs) return out;
        out.node_->requires_grad = true;
        out.node_->backward_fn = std::move(backward_fn);
        out.node_->parents.reserve(parents.size());
        for (auto& p : parents) out.node_->parents.push_back(p.node_);
        return out;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const T> data() const { return node_->value; }
    const std::vector<T>& values() const& { return node_->value; }
    std::vector<T> values() const&& { return node_->value; }
    /// Direct write access. Reserved for optimizers and loaders acting on leaves.
    std::span<T> mutable_data() { return node_->value; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    T at(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != rank()) throw DimensionError("index rank mismatch");
        std::size_t flat = 0;
        std::size_t a = 0;
        for (auto i : idx) flat = flat * node_->shape[a++] + i;
        return node_->value.at(flat);
    }

    /// A fresh leaf holding a copy of the values.
    Tensor detach() const { return Tensor(shape(), node_->value); }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

    /// Reverse sweep from a scalar. Gradients accumulate into every reachable
    /// node that requires one; leaves keep theirs until zero_grad().
    void backward() const {
        if (!defined() || numel() != 1) {
            throw ContractError("backward() requires a scalar loss, got shape " +
                                (defined() ? shape_str(shape()) : std::string("<undefined>")));
        }
        if (!node_->requires_grad) return;
        std::vector<Node<T>*> order;
        std::unordered_set<Node<T>*> seen;
        std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                Node<T>* p = n->parents[next++].get();
                if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        node_->ensure_grad();
        node_->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<T>* n = *it;
            if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
        }
    }

private:
    std::shared_ptr<Node<T>> node_;
};

}  // namespace usts
