#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cdformer/errors.hpp"

namespace cdformer {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatMap = Eigen::Map<RowMat<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const RowMat<Scalar>>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool& finite_check() {
#ifdef NDEBUG
  thread_local bool enabled = false;
#else
  thread_local bool enabled = true;
#endif
  return enabled;
}
}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Turns the per-op NaN/Inf check on or off for the current thread. The check
/// is on by default in debug builds.
class FiniteCheckGuard {
 public:
  explicit FiniteCheckGuard(bool enabled) : previous_(detail::finite_check()) {
    detail::finite_check() = enabled;
  }
  ~FiniteCheckGuard() { detail::finite_check() = previous_; }
  FiniteCheckGuard(const FiniteCheckGuard&) = delete;
  FiniteCheckGuard& operator=(const FiniteCheckGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <typename Scalar>
struct TensorNode {
  Shape shape;
  Vec<Scalar> value;
  Vec<Scalar> grad;  // empty until the first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(const Vec<Scalar>&)> backward;

  Vec<Scalar>& grad_buffer() {
    if (grad.size() != value.size()) grad = Vec<Scalar>::Zero(value.size());
    return grad;
  }
  bool is_leaf() const { return !backward; }
};

/// Dense row-major N-d array with an optional gradient slot. Copies are
/// handles that share the same node.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using Node = TensorNode<Scalar>;

  Tensor() = default;

  Tensor(Shape shape, Vec<Scalar> values, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    for (Index extent : shape) {
      if (extent < 0) throw DimensionError("negative extent in shape " + shape_string(shape));
    }
    if (numel(shape) != values.size()) {
      throw DimensionError("shape " + shape_string(shape) + " holds " +
                           std::to_string(numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values, bool requires_grad = false)
      : Tensor(std::move(shape), from_list(values), requires_grad) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const Index n = numel(shape);
    return Tensor(std::move(shape), Vec<Scalar>::Zero(n), requires_grad);
  }
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false) {
    const Index n = numel(shape);
    return Tensor(std::move(shape), Vec<Scalar>::Constant(n, value), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), Scalar(1), requires_grad);
  }
  static Tensor scalar(Scalar value, bool requires_grad = false) {
    return full({}, value, requires_grad);
  }

  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  Index dim(std::size_t axis) const { return node_->shape.at(axis); }
  Index size() const { return node_->value.size(); }

  const Vec<Scalar>& value() const { return node_->value; }
  /// Direct write access; only meant for optimisers and initialisers acting on leaves.
  Vec<Scalar>& mutable_value() { return node_->value; }
  Scalar operator[](Index i) const { return node_->value[i]; }

  Scalar item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return node_->is_leaf(); }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  /// Gradient buffer, zeros when nothing has been accumulated yet.
  Vec<Scalar> grad() const {
    return has_grad() ? node_->grad : Vec<Scalar>::Zero(node_->value.size());
  }
  Vec<Scalar>& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() {
    if (has_grad()) node_->grad.setZero();
  }

  const char* op() const { return node_->op; }
  const std::shared_ptr<Node>& node() const { return node_; }

  /// Value copy detached from any graph.
  Tensor detach() const { return Tensor(shape(), value(), false); }

 private:
  static Vec<Scalar> from_list(std::initializer_list<Scalar> values) {
    Vec<Scalar> v(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar x : values) v[i++] = x;
    return v;
  }

  std::shared_ptr<Node> node_;
};

/// Records a primitive op. `backward` receives the output gradient and pushes
/// contributions into whichever inputs require them.
template <typename Scalar, typename Backward>
Tensor<Scalar> make_op(const char* name, Shape shape, Vec<Scalar> value,
                       const std::vector<Tensor<Scalar>>& inputs, Backward&& backward) {
  if (detail::finite_check() && !value.allFinite()) {
    throw NumericError(std::string("non-finite value produced by ") + name);
  }
  Tensor<Scalar> out(std::move(shape), std::move(value), false);
  auto& node = *out.node();
  node.op = name;
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  node.requires_grad = true;
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.requires_grad()) node.inputs.push_back(in.node());
  }
  node.backward = std::forward<Backward>(backward);
  return out;
}

/// Ordered record of the ops reachable from `root`: every op appears after its
/// inputs, and each node appears exactly once.
template <typename Scalar>
std::vector<TensorNode<Scalar>*> build_tape(const Tensor<Scalar>& root) {
  using Node = TensorNode<Scalar>;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients are recomputed each time.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("<null>")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() on a loss that does not depend on any tensor requiring grad");
  }
  auto tape = build_tape(loss);
  for (auto* node : tape) {
    if (!node->is_leaf()) node->grad = Vec<Scalar>::Zero(node->value.size());
  }
  loss.node()->grad_buffer()[0] += Scalar(1);
  for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
    auto* node = *it;
    if (!node->is_leaf()) node->backward(node->grad);
  }
}

}  // namespace cdformer
