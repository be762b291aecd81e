#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "fcvit/tensor.hpp"

namespace fcvit {

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <Real T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads `grad` of this node and accumulates into the parents.
    std::function<void(const Tensor<T>&)> backward_fn;

    Tensor<T>& grad_buffer() {
        if (grad.empty()) grad = Tensor<T>::zeros(value.shape());
        return grad;
    }
};

/// Handle to a value in the reverse-mode graph. Copies share the node.
template <Real T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    static Var leaf(Tensor<T> value) { return Var(std::move(value), true); }
    static Var constant(Tensor<T> value) { return Var(std::move(value), false); }

    explicit operator bool() const { return node_ != nullptr; }

    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t numel() const { return node_->value.numel(); }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }

    /// Gradient buffer; zeros when no gradient has flowed yet.
    const Tensor<T>& grad() const { return node_->grad_buffer(); }
    Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.fill(T(0));
    }

    void accumulate_grad(const Tensor<T>& g) const {
        auto& buf = node_->grad_buffer();
        require_shape(buf.shape() == g.shape(), "gradient shape mismatch");
        for (std::size_t i = 0; i < g.numel(); ++i) buf[i] += g[i];
    }

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Wraps a kernel result. `backward(out_grad)` is recorded only when grad mode
/// is on and some input requires a gradient.
template <Real T, typename Backward>
Var<T> make_result(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward&& backward) {
    Var<T> out(std::move(value), false);
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || (in && in.requires_grad());
    if (!any) return out;
    auto* node = out.node();
    node->requires_grad = true;
    for (const auto& in : inputs) {
        if (in) node->parents.push_back(in.node_ptr());
    }
    node->backward_fn = std::forward<Backward>(backward);
    return out;
}

/// Reverse sweep from a single-element output. Leaf gradients accumulate.
template <Real T>
void backward(const Var<T>& root) {
    require_shape(root.numel() == 1, "backward() needs a scalar root");
    if (!root.requires_grad()) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node<T>* p = n->parents[i++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    root.node()->grad_buffer().fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(n->grad);
    }
    // Interior buffers are not needed after the sweep.
    for (Node<T>* n : order) {
        if (n->backward_fn) n->grad = Tensor<T>();
    }
}

}  // namespace fcvit
