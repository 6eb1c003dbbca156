// Dense tensors with a dynamically recorded reverse-mode differentiation graph.
#pragma once

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
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

namespace grassmann {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : unsigned { Float32 = 0, Float64 = 1 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold float or double");
  return std::is_same_v<T, float> ? DType::Float32 : DType::Float64;
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

// Graph recording is a per-thread switch so that inference on one thread
// never interferes with training on another.
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording for the lifetime of the guard.
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

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until backward reaches this node
  bool requires_grad = false;
  bool is_leaf = true;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
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

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape.empty()) shape = {1};
    for (auto extent : shape)
      if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != values.size())
      throw ShapeError("shape " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape.empty() ? Shape{1} : shape);
    return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    auto n = shape_numel(shape.empty() ? Shape{1} : shape);
    return from(std::move(shape), std::vector<T>(n, fill), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  /// Extent of the last axis.
  std::size_t cols() const { return node_->shape.back(); }
  /// Product of every extent but the last.
  std::size_t rows() const { return numel() / cols(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::span<const T> values() const { return node_->value; }
  /// Direct write access, for initialisation and optimiser updates on leaves.
  std::span<T> mutable_values() { return node_->value; }
  T at(std::size_t i) const { return node_->value.at(i); }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf) throw std::logic_error("requires_grad can only be toggled on leaves");
    node_->requires_grad = on;
  }
  bool is_leaf() const { return node_->is_leaf; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const {
    if (!has_grad()) node_->ensure_grad();
    return node_->grad;
  }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  /// Leaf copy of the current values, detached from any graph.
  Tensor detach() const { return from(shape(), node_->value, false); }
  Tensor clone() const { return from(shape(), node_->value, requires_grad()); }

  const std::string& op() const { return node_->op; }
  Node<T>& node() const { return *node_; }
  const NodePtr& node_ptr() const { return node_; }

  void backward() const;

 private:
  NodePtr node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

template <class T>
void ensure_finite(std::span<const T> values, const std::string& op) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << "non-finite value " << values[i] << " at element " << i << " produced by " << op;
      throw NonFiniteError(os.str());
    }
  }
}

/// Records the result of an operation. The backward rule receives the result
/// node and must accumulate into the grads of any parent that requires grad.
/// Public so that callers can register their own differentiable operations.
template <class T>
Tensor<T> make_op(std::string op, Shape shape, std::vector<T> value,
                  std::vector<Tensor<T>> inputs, std::function<void(Node<T>&)> backward_fn) {
  ensure_finite<T>(value, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = std::move(op);
  node->is_leaf = false;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any && grad_enabled()) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

/// Reverse topological order of every node reachable from `root` that
/// participates in differentiation.
template <class T>
std::vector<Node<T>*> topological_order(Node<T>& root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  // Iterative post-order DFS; deep models would overflow a recursive walk.
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(&root, 0);
  visited.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  std::reverse(order.begin(), order.end());
  return order;
}

template <class T>
void Tensor<T>::backward() const {
  if (numel() != 1)
    throw ShapeError("backward() needs a scalar output, got " + shape_str(shape()));
  if (!requires_grad()) return;
  auto order = topological_order(*node_);
  // Interior grads are per-call scratch; leaves accumulate across calls.
  for (auto* n : order)
    if (!n->is_leaf) n->grad.assign(n->value.size(), T(0));
  node_->ensure_grad()[0] += T(1);
  for (auto* n : order)
    if (!n->is_leaf && n->backward_fn) n->backward_fn(*n);
}

}  // namespace grassmann
