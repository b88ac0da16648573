// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "grainmoe/tensor.hpp"

namespace grainmoe {

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) {
    detail::grad_enabled_flag() = false;
  }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// One vertex of the reverse-mode tape. Inputs are owned, so the graph lives
/// exactly as long as the outputs that reference it.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }

  /// Gradient buffer of input i, or nullptr when it does not need one.
  Tensor<T>* input_grad(std::size_t i) {
    auto& in = inputs[i];
    return in->requires_grad ? &in->grad_buffer() : nullptr;
  }

  const Tensor<T>& input_value(std::size_t i) const { return inputs[i]->value; }
};

/// Handle to a node. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;

  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }
  static Var constant(Tensor<T> value) { return Var(std::move(value), false); }

  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  // Only the optimizer and gradient checker mutate leaf values.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  T item() const { return node_->value.item(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient tensor; zeros if nothing has accumulated yet.
  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.fill(T{0});
  }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared_node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. The backward closure is dropped when no input needs
/// a gradient or recording is disabled.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.shared_node());
    node->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(node));
}

/// Nodes reachable from root that require gradients, inputs before outputs.
template <typename T>
std::vector<Node<T>*> topological_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  if (!root->requires_grad) return order;
  std::unordered_set<Node<T>*> visited;
  // Iterative post-order DFS; graphs can be deep.
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

/// Reverse-mode sweep from a scalar root. Gradients accumulate into every
/// reachable node that requires them; call zero_grad on leaves between steps.
/// Returns the number of nodes visited.
template <typename T>
std::size_t backward(const Var<T>& root) {
  if (root.size() != 1) {
    throw ShapeError("backward() requires a scalar root, got " +
                     shape_str(root.shape()));
  }
  auto order = topological_order(root.node());
  if (order.empty()) return 0;
  root.node()->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  return order.size();
}

}  // namespace grainmoe
