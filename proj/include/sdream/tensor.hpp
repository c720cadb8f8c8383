#pragma once

#include <cmath>
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

#include "sdream/error.hpp"

namespace sdream {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

namespace detail {

/// One vertex of the define-by-run graph. A node without `backward_fn` is a
/// leaf; leaves keep their gradient across backward calls, interior nodes
/// only hold one while a backward pass is running.
struct Node {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  // Unlinks long chains iteratively instead of through nested destructors.
  ~Node() {
    std::vector<std::shared_ptr<Node>> pending = std::move(inputs);
    while (!pending.empty()) {
      std::shared_ptr<Node> n = std::move(pending.back());
      pending.pop_back();
      if (n && n.use_count() == 1) {
        for (auto& in : n->inputs) pending.push_back(std::move(in));
        n->inputs.clear();
      }
    }
  }

  bool is_leaf() const { return !backward_fn; }

  /// Gradient buffer of this node, zero-initialized on first touch.
  std::span<double> grad_buffer() {
    if (grad.empty()) grad.assign(data->size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major float64 tensor with reverse-mode autodiff.
///
/// Copies share storage and graph position (handle semantics). Values are
/// fixed after construction; only parameter leaves are updated in place by
/// an optimizer through mutable_data().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> values(shape_numel(shape), 0.0);
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> values(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{}, {value}, requires_grad);
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (values.size() != shape_numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_string(shape));
    }
    for (double v : values) {
      if (!std::isfinite(v)) throw NumericError("non-finite value in tensor data");
    }
    node_->shape = std::move(shape);
    node_->data = std::make_shared<std::vector<double>>(std::move(values));
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data->size(); }
  std::span<const double> data() const { return *node_->data; }
  double operator[](std::size_t i) const { return (*node_->data)[i]; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return (*node_->data)[0];
  }

  /// In-place access for optimizers. Only valid on leaves.
  std::span<double> mutable_data() {
    if (!node_->is_leaf()) throw ContractError("mutable_data() on a non-leaf tensor");
    return *node_->data;
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// New leaf sharing storage, outside any graph.
  Tensor detach() const {
    Tensor out;
    out.node_ = std::make_shared<detail::Node>();
    out.node_->shape = node_->shape;
    out.node_->data = node_->data;
    return out;
  }

  /// Deep copy of values into an independent leaf.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), std::vector<double>(data().begin(), data().end()), requires_grad);
  }

  /// Reverse sweep from this scalar. Leaf gradients accumulate (+=) across
  /// calls until cleared with zero_grad().
  void backward() const {
    if (numel() != 1) {
      throw ContractError("backward() requires a scalar loss, got shape " + shape_string(shape()));
    }
    if (!node_->requires_grad) throw ContractError("backward() on a tensor with no gradient path");

    // Iterative post-order DFS yields a topological order (inputs first).
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    for (detail::Node* n : order) {
      if (!n->is_leaf()) n->grad.assign(n->data->size(), 0.0);
    }
    node_->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
    }
    for (detail::Node* n : order) {
      if (!n->is_leaf()) std::vector<double>().swap(n->grad);
    }
  }

  /// Builds an op result. The backward closure receives the result node and
  /// must add into the grad buffers of the inputs that require grad.
  static Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                            std::function<void(detail::Node&)> backward_fn, const char* op) {
    for (double v : values) {
      if (!std::isfinite(v)) throw NumericError(std::string("non-finite output in ") + op);
    }
    Tensor out;
    out.node_ = std::make_shared<detail::Node>();
    out.node_->shape = std::move(shape);
    out.node_->data = std::make_shared<std::vector<double>>(std::move(values));
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      out.node_->requires_grad = true;
      for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
      out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
  }

  /// Graph node handle, for op implementations.
  detail::Node& node() const { return *node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Gradient sink of an op input, or an empty span when the input does not
/// take part in differentiation.
inline std::span<double> input_grad(detail::Node& out, std::size_t index) {
  detail::Node& in = *out.inputs[index];
  if (!in.requires_grad) return {};
  return in.grad_buffer();
}

}  // namespace sdream
