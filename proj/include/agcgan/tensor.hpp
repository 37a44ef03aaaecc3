#pragma once

// Reverse-mode automatic differentiation core.
//
// A Tensor is a cheap handle onto a graph node. Values are immutable once an
// op has produced them; only leaves (parameters) are mutated, and only by the
// optimizer. Every op checks that its output is finite and throws NumericError
// otherwise, so NaN/Inf never propagate silently through a graph.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace agc {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel_of(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                       std::to_string(numel_of(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_ = std::make_shared<Node<T>>();
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= rank()) {
      throw ShapeError("tensor: dimension " + std::to_string(i) +
                       " out of range for shape " + shape_str(shape()));
    }
    return node().shape[i];
  }
  std::size_t numel() const { return node().value.size(); }
  const char* op() const { return node().op; }

  std::span<const T> data() const { return node().value; }
  // Only meaningful on leaves; used by optimizers and checkpoint loading.
  std::span<T> mutable_data() { return node().value; }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool on) {
    if (!node().is_leaf()) {
      throw std::logic_error("tensor: requires_grad can only be changed on leaves");
    }
    node().requires_grad = on;
  }

  bool has_grad() const { return node().grad.size() == numel(); }
  std::span<const T> grad() const {
    if (!has_grad()) {
      node().grad.assign(numel(), T(0));
    }
    return node().grad;
  }
  void zero_grad() { node().grad.assign(numel(), T(0)); }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("tensor: item() on non-scalar " + shape_str(shape()));
    }
    return node().value[0];
  }

  T operator[](std::size_t i) const { return node().value.at(i); }

  // New leaf sharing no graph with this tensor.
  Tensor detach() const {
    return Tensor(node().shape, node().value, false);
  }

  Tensor clone_leaf(bool requires_grad) const {
    return Tensor(node().shape, node().value, requires_grad);
  }

  Node<T>& node() const {
    if (!node_) throw std::logic_error("tensor: use of undefined tensor");
    return *node_;
  }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

template <typename T>
void require_finite(const std::vector<T>& values, const char* op) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string("non-finite value produced by ") + op +
                         " at element " + std::to_string(i));
    }
  }
}

// Builds the result node of an op. The backward closure is kept only when at
// least one parent participates in differentiation.
template <typename T, typename Backward>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::initializer_list<Tensor<T>> parents,
                      Backward&& backward) {
  require_finite(values, op);
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(values);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward_fn = std::forward<Backward>(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

}  // namespace detail

// Accumulates d(root)/d(leaf) into every requires_grad leaf reachable from
// root. Interior gradients are recomputed from scratch on each call; leaf
// gradients accumulate until zero_grad().
template <typename T>
void backward(const Tensor<T>& root) {
  if (root.numel() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " +
                     shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;
  auto order = detail::topo_order(&root.node());
  for (Node<T>* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
  }
  root.node().grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->is_leaf()) n->backward_fn(*n);
  }
}

}  // namespace agc
