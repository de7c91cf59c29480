#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "forenvit/error.hpp"

namespace forenvit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something accumulates into it
  bool trainable = false;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

}  // namespace detail

/// Handle to a value in the differentiation graph. Copies share the node;
/// operations always produce fresh nodes and never touch their inputs.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<detail::Node<T>>()) {
    for (auto e : shape)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != data.size())
      throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                       " values");
    node_->shape = std::move(shape);
    node_->value = std::move(data);
  }

  static Tensor zeros(Shape shape) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)));
  }
  static Tensor filled(Shape shape, T v) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v));
  }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }
  static Tensor parameter(Shape shape, std::vector<T> data) {
    Tensor t(std::move(shape), std::move(data));
    t.set_trainable(true);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  const T* ptr() const { return node_->value.data(); }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  /// Direct write access. Only leaves may be written (initialisation, optimizer).
  std::span<T> mutable_data() {
    if (!node_->leaf) throw ContractError("cannot write into a computed tensor");
    return node_->value;
  }

  bool trainable() const { return node_->trainable; }
  void set_trainable(bool on) {
    if (!node_->leaf) throw ContractError("only leaf tensors carry a trainable flag");
    node_->trainable = on;
    node_->requires_grad = on;
    if (!on) node_->grad.clear();
  }
  bool requires_grad() const { return node_->requires_grad; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Value copy with no graph history; the copy is a non-trainable leaf.
  Tensor detach() const { return Tensor(shape(), node_->value); }
  /// Deep copy of a leaf including its trainable flag.
  Tensor clone() const {
    Tensor t(shape(), node_->value);
    t.node_->trainable = node_->trainable;
    t.node_->requires_grad = node_->trainable;
    return t;
  }

  const NodePtr& node() const { return node_; }
  static Tensor from_node(NodePtr n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  NodePtr node_;
};

/// Accumulates d(loss)/d(leaf) into every trainable ancestor of `loss`.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  if (!loss.requires_grad()) return;

  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      NodeT* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->leaf || n->grad.empty()) continue;
    if (n->backward) n->backward(*n);
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

}  // namespace forenvit
