#pragma once

// Tensor-granular reverse-mode differentiation.
//
// Every op allocates one node holding its forward value and a closure that
// scatters the node's gradient into its parents. Nodes whose parents do not
// require gradients carry no closure, so inference builds no tape.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dfq/core/tensor.hpp"

namespace dfq {

template <typename T>
class Var {
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Tensor<T>&)> backward;
  };

 public:
  Var() = default;

  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    Var v;
    v.node_ = std::make_shared<Node>();
    v.node_->value = std::move(value);
    v.node_->requires_grad = requires_grad;
    return v;
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

  /// Gradient accumulated by the last backward(); empty when none reached this node.
  const Tensor<T>& grad() const { return node_->grad; }

  /// Gradient buffer, zero-initialised on first access. Used by op closures.
  Tensor<T>& grad_buffer() const {
    if (node_->grad.size() != node_->value.size()) node_->grad = Tensor<T>(node_->value.shape());
    return node_->grad;
  }

  void zero_grad() const { node_->grad = Tensor<T>(); }

  /// Back-propagates from this node; seeds with ones (a scalar root gets d/d=1).
  void backward() const {
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->grad = Tensor<T>(node_->value.shape(), T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward && n->grad.size() == n->value.size()) n->backward(n->grad);
    }
  }

  /// Builds a result node. `backward` receives the upstream gradient and must
  /// accumulate into parents via grad_buffer().
  template <typename F>
  static Var make(Tensor<T> value, std::vector<Var> parents, F&& backward) {
    Var out;
    out.node_ = std::make_shared<Node>();
    out.node_->value = std::move(value);
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      out.node_->requires_grad = true;
      for (auto& p : parents) out.node_->parents.push_back(p.node_);
      out.node_->backward = std::forward<F>(backward);
    }
    return out;
  }

 private:
  std::shared_ptr<Node> node_;
};

}  // namespace dfq
