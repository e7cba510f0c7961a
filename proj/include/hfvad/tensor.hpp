#pragma once

// Minimal reverse-mode differentiable array engine.
//
// A Tensor is a shared handle onto a Node holding a dense row-major value buffer.
// Operations produce new nodes; when any operand requires a gradient (and gradient
// recording is enabled) the result keeps references to its operands plus a backward
// closure, forming the graph that `backward()` walks in reverse topological order.

#include <cmath>
#include <concepts>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hfvad/common.hpp"

namespace hfvad::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <std::floating_point T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

namespace detail {
inline int& no_grad_depth() {
  thread_local int depth = 0;
  return depth;
}
}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth() == 0; }

/// Disables graph recording on the current thread for its lifetime (inference, scoring).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth(); }
  ~NoGradGuard() { --detail::no_grad_depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    if (ad::numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + to_string(shape) + " does not match " + std::to_string(values.size()) +
                           " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(0), requires_grad); }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    const auto n = ad::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, fill), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Mutable access is reserved for leaves (parameters updated by an optimizer, test fixtures).
  std::span<T> mutable_data() {
    if (!node_->is_leaf()) throw Error("mutable_data on a non-leaf tensor");
    return node_->value;
  }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->grad.empty(); }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value.at(i); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw Error("requires_grad can only be set on leaves");
    node_->requires_grad = on;
  }
  bool is_leaf() const { return node_->is_leaf(); }
  std::string_view op() const { return node_->op; }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  /// Value copy with no graph attached.
  Tensor detach() const { return Tensor(node_->shape, node_->value, false); }

  const NodePtr& node() const { return node_; }

  void backward() const;

 private:
  NodePtr node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

/// Throws NumericError if any value is NaN or infinite.
template <std::floating_point T>
void check_finite(std::span<const T> values, std::string_view what) {
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite value produced by " + std::string(what));
  }
}

/// Builds an op result. The graph link is kept only when some input requires a gradient
/// and recording is enabled, so inference never retains activations.
template <std::floating_point T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::string_view op,
                      std::vector<std::shared_ptr<Node<T>>> inputs, std::function<void(Node<T>&)> backward) {
  check_finite<T>(value, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

/// Nodes reachable from `root` in topological order (inputs before consumers).
template <std::floating_point T>
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

template <std::floating_point T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw DimensionError("backward() needs a scalar loss, got shape " + to_string(shape()));
  if (!node_->requires_grad) throw Error("backward() on a tensor detached from any differentiable leaf");
  auto order = topological_order(node_.get());
  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (Node<T>* n : order) {
    if (n->is_leaf() && !n->grad.empty()) check_finite<T>(n->grad, "backward");
  }
}

}  // namespace hfvad::ad
