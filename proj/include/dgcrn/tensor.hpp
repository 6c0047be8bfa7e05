#pragma once

// Dense row-major tensor with tape-free reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared Node. Every op that has at least
// one operand with requires_grad set records its operands and a backward
// closure on the result node; Tensor::backward() walks that DAG in reverse
// topological order. Gradients accumulate additively (fan-out sums) and are
// only cleared by an explicit zero_grad().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dgcrn/error.hpp"

namespace dgcrn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                           std::to_string(numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    for (auto d : shape) {
      if (d == 0) throw DimensionError("zero extent in shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
  static Tensor full(Shape shape, T v) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v));
  }
  static Tensor scalar(T v) { return Tensor(Shape{1}, {v}); }

  // Learnable leaf.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    return Tensor(std::move(shape), std::move(values), true);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  // Negative indices count from the back.
  std::size_t dim(int i) const {
    const int r = static_cast<int>(rank());
    const int k = i < 0 ? r + i : i;
    if (k < 0 || k >= r) throw DimensionError("axis out of range for " + shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(k)];
  }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw DimensionError("index rank mismatch for " + shape_str(shape()));
    std::size_t off = 0;
    std::size_t k = 0;
    for (auto i : idx) {
      if (i >= node_->shape[k]) throw DimensionError("index out of range for " + shape_str(shape()));
      off = off * node_->shape[k] + i;
      ++k;
    }
    return node_->value[off];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }

  // Zero-filled when nothing has been accumulated yet.
  std::vector<T> grad() const {
    if (node_->grad.empty()) return std::vector<T>(size(), T(0));
    return node_->grad;
  }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // Same values, no history.
  Tensor detach() const { return Tensor(shape(), values(), false); }

  Tensor clone_parameter() const { return Tensor(shape(), values(), requires_grad()); }

  bool all_finite() const {
    return std::all_of(node_->value.begin(), node_->value.end(),
                       [](T v) { return std::isfinite(v); });
  }

  // Seeds d(this)/d(this) = 1 and propagates to every reachable node that
  // requires a gradient.
  void backward() const {
    if (size() != 1) {
      throw DimensionError("backward() needs a scalar, got " + shape_str(shape()));
    }
    if (!node_->requires_grad) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
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

    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// While a guard is alive on this thread, ops record no history (inference).
inline bool& grad_disabled() {
  thread_local bool off = false;
  return off;
}

class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_disabled()) { grad_disabled() = true; }
  ~NoGradGuard() { grad_disabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Builds an op result. History is recorded only when some operand needs a
// gradient, so constant-only expressions stay allocation-light.
template <class T, class Backward>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> operands,
                      Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (!grad_disabled()) {
    for (const Tensor<T>* op : operands) {
      if (op->requires_grad()) node->requires_grad = true;
    }
  }
  if (node->requires_grad) {
    for (const Tensor<T>* op : operands) node->parents.push_back(op->node());
    node->backward_fn = std::forward<Backward>(backward);
  }
  return Tensor<T>(std::move(node));
}

template <class T, class Backward>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      const std::vector<Tensor<T>>& operands, Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (!grad_disabled()) {
    for (const auto& op : operands) {
      if (op.requires_grad()) node->requires_grad = true;
    }
  }
  if (node->requires_grad) {
    for (const auto& op : operands) node->parents.push_back(op.node());
    node->backward_fn = std::forward<Backward>(backward);
  }
  return Tensor<T>(std::move(node));
}

// Converts values between precisions, dropping history.
template <class To, class From>
Tensor<To> cast(const Tensor<From>& t, bool requires_grad = false) {
  std::vector<To> v(t.data().begin(), t.data().end());
  return Tensor<To>(t.shape(), std::move(v), requires_grad);
}

}  // namespace dgcrn
