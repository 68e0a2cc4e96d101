#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sgdiff/tensor.hpp"

namespace sgdiff {

// Reverse-mode autodiff over a dynamically recorded acyclic graph.
//
// VarT is a cheap handle to a graph node. Ops build fresh nodes; when grad
// recording is off (or no input requires grad) the node is a detached leaf,
// so inference pays nothing for the tape.

template <typename T>
struct NodeT {
    TensorT<T> value;
    TensorT<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<NodeT>> parents;
    // Reads this->grad, accumulates into parents' grads.
    std::function<void(NodeT&)> backward;

    void accumulate(const TensorT<T>& g) {
        if (!grad.defined()) grad = TensorT<T>::zeros(value.shape());
        SGDIFF_CHECK(g.numel() == grad.numel(), "gradient shape ", shape_str(g.shape()),
                     " does not match value shape ", shape_str(value.shape()));
        T* dst = grad.ptr();
        const T* src = g.ptr();
        for (int64_t i = 0; i < g.numel(); i++) dst[i] += src[i];
    }
};

namespace detail {
inline thread_local bool grad_enabled = true;
}

struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_mode() { return detail::grad_enabled; }

template <typename T>
class VarT {
public:
    VarT() = default;
    explicit VarT(std::shared_ptr<NodeT<T>> node) : node_(std::move(node)) {}

    // Detached constant.
    explicit VarT(TensorT<T> value) : node_(std::make_shared<NodeT<T>>()) {
        node_->value = std::move(value);
    }

    static VarT leaf(TensorT<T> value, bool requires_grad) {
        VarT v(std::move(value));
        v.node_->requires_grad = requires_grad;
        return v;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const TensorT<T>& value() const { return node_->value; }
    const TensorT<T>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }
    const Shape& shape() const { return node_->value.shape(); }
    int64_t numel() const { return node_->value.numel(); }

    std::shared_ptr<NodeT<T>>& node() { return node_; }
    const std::shared_ptr<NodeT<T>>& node() const { return node_; }

    // Grad as a tensor, zeros if never touched by backward.
    TensorT<T> grad_or_zero() const {
        return node_->grad.defined() ? node_->grad : TensorT<T>::zeros(node_->value.shape());
    }

    void zero_grad() { node_->grad = TensorT<T>(); }

    // Replace the stored value (optimizer step). The old tensor stays valid
    // for anyone still holding it.
    void assign_value(TensorT<T> v) {
        SGDIFF_CHECK(v.shape() == node_->value.shape(), "assign_value shape mismatch");
        node_->value = std::move(v);
    }

    VarT detached() const { return VarT(node_->value); }

private:
    std::shared_ptr<NodeT<T>> node_;
};

// Builds an op node. parents/backward are recorded only when grad recording
// is active and some parent requires grad.
template <typename T>
VarT<T> make_op_node(TensorT<T> value, std::vector<VarT<T>> parents,
                     std::function<void(NodeT<T>&)> backward) {
    auto node = std::make_shared<NodeT<T>>();
    node->value = std::move(value);
    bool need = false;
    if (grad_mode()) {
        for (const auto& p : parents)
            if (p.requires_grad()) need = true;
    }
    if (need) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node());
        node->backward = std::move(backward);
    }
    return VarT<T>(node);
}

// Populates grads of every node reachable from `loss`. Unreachable
// parameters keep their (zero) grads.
template <typename T>
void backward(const VarT<T>& loss) {
    SGDIFF_CHECK(loss.defined(), "backward on empty var");
    SGDIFF_CHECK(loss.numel() == 1, "backward requires a scalar loss, got shape ",
                 shape_str(loss.shape()));

    // Iterative topological order (children before parents after reversal).
    std::vector<NodeT<T>*> order;
    std::unordered_set<NodeT<T>*> seen;
    struct Frame {
        NodeT<T>* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node().get(), 0});
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            NodeT<T>* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    loss.node()->accumulate(TensorT<T>::ones(loss.shape()));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT<T>* n = *it;
        if (n->backward && n->grad.defined()) n->backward(*n);
    }
}

using Var = VarT<float>;
using VarD = VarT<double>;

}  // namespace sgdiff
