#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "distill_seg/error.hpp"

namespace distill_seg {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

// One entry of the autodiff tape. Non-leaf nodes keep their inputs alive
// and a closure that scatters this node's gradient into them.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const noexcept { return inputs.empty(); }

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

inline thread_local bool grad_mode_enabled = true;

}  // namespace detail

// Disables tape recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() noexcept : previous_(detail::grad_mode_enabled) {
    detail::grad_mode_enabled = false;
  }
  ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() noexcept { return detail::grad_mode_enabled; }

// Dense row-major tensor with shared ownership of its storage. Copies
// alias the same node; use clone() for an independent value copy. Models
// train in float; double exists for finite-difference verification.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Node = detail::Node<T>;

  BasicTensor() = default;

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    return from(shape, std::vector<T>(static_cast<std::size_t>(numel_checked(shape)), T(0)),
                requires_grad);
  }

  static BasicTensor full(Shape shape, T v, bool requires_grad = false) {
    return from(shape, std::vector<T>(static_cast<std::size_t>(numel_checked(shape)), v),
                requires_grad);
  }

  static BasicTensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel_checked(shape) != static_cast<std::int64_t>(values.size()))
      fail_validation("tensor shape ", shape_str(shape), " needs ", numel_of(shape),
                      " values, got ", values.size());
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    if (requires_grad) node->ensure_grad();
    return BasicTensor(std::move(node));
  }

  static BasicTensor scalar(T v, bool requires_grad = false) {
    return from({}, {v}, requires_grad);
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  std::span<T> grad() { return node_->ensure_grad(); }
  std::span<const T> grad() const { return node_->ensure_grad(); }

  T item() const {
    if (numel() != 1) fail_validation("item() on tensor of shape ", shape_str(shape()));
    return node_->value[0];
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // Independent leaf holding a copy of the current value.
  BasicTensor clone(bool requires_grad = false) const {
    return from(shape(), node_->value, requires_grad);
  }

  // Same storage viewed with a new shape of equal element count; recorded
  // on the tape so gradients flow through.
  BasicTensor reshape(Shape new_shape) const;

  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const noexcept { return node_; }

  explicit BasicTensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  static std::int64_t numel_checked(const Shape& shape) {
    for (auto e : shape)
      if (e <= 0) fail_validation("tensor extents must be positive, got ", shape_str(shape));
    return numel_of(shape);
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

// Creates the output node of an op. The backward closure is attached only
// when grad mode is on and some input participates in differentiation.
template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> value,
                           std::initializer_list<const BasicTensor<T>*> inputs,
                           std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool track = false;
  if (grad_mode_enabled)
    for (const auto* t : inputs) track = track || t->requires_grad();
  if (track) {
    node->requires_grad = true;
    for (const auto* t : inputs) node->inputs.push_back(t->node_ptr());
    node->backward = std::move(backward);
  }
  return BasicTensor<T>(std::move(node));
}

// Reverse-execution order of every node reachable from root (post-order DFS,
// so inputs precede consumers).
template <typename T>
std::vector<Node<T>*> topological_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

template <typename T>
BasicTensor<T> BasicTensor<T>::reshape(Shape new_shape) const {
  if (numel_checked(new_shape) != static_cast<std::int64_t>(numel()))
    fail_validation("cannot reshape ", shape_str(shape()), " to ", shape_str(new_shape));
  return detail::make_result<T>(std::move(new_shape), node_->value, {this}, [](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// Vector-Jacobian product: accumulates seed^T d(output)/d(leaf) into every
// requires_grad leaf reachable from output. Intermediate gradients are reset
// first, so repeating the call after zeroing the leaves reproduces them.
template <typename T>
void backward(const BasicTensor<T>& output, std::span<const T> seed) {
  if (!output.defined()) fail_validation("backward on undefined tensor");
  if (seed.size() != output.numel())
    fail_validation("backward seed has ", seed.size(), " elements, output has ", output.numel());
  detail::Node<T>* root = output.node();
  if (!root->requires_grad) return;
  auto order = detail::topological_order(root);
  for (detail::Node<T>* n : order)
    if (!n->is_leaf()) {
      auto& g = n->ensure_grad();
      std::fill(g.begin(), g.end(), T(0));
    }
  auto& rg = root->ensure_grad();
  for (std::size_t i = 0; i < seed.size(); ++i) rg[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* n = *it;
    if (n->backward) n->backward(*n);
  }
}

// d(loss)/d(leaf) for a scalar loss.
template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (loss.defined() && loss.numel() != 1)
    fail_validation("backward needs a scalar loss, got shape ", shape_str(loss.shape()));
  const T one(1);
  backward(loss, std::span<const T>(&one, 1));
}

using Tensor = BasicTensor<float>;
using DoubleTensor = BasicTensor<double>;

}  // namespace distill_seg
