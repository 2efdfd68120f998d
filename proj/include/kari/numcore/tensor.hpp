#pragma once

// Dense double-precision tensors with reverse-mode gradient tracking.
//
// A Tensor is a cheap handle onto an immutable node. Operations that take a
// tracked input record a backward closure on the result node; the closures
// form an acyclic graph rooted at whatever scalar is later passed to
// backward(). Gradient buffers live in a per-call table rather than on the
// nodes, so leaves (parameters) may be shared across concurrent graphs.

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kari/error.hpp"

namespace kari::nc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace detail {

struct Node;

/// Propagates the output gradient into the parents' gradient buffers.
/// parent_grads[i] is null when parent i is not tracked.
using BackwardFn =
    std::function<void(std::span<const double> out_grad, std::span<std::vector<double>*> parent_grads)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  bool tracked = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

}  // namespace detail

class Tensor {
public:
  Tensor() : Tensor(Shape{0}, std::vector<double>{}) {}

  Tensor(Shape shape, std::vector<double> values, bool tracked = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->tracked = tracked;
  }

  static Tensor zeros(Shape shape, bool tracked = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), tracked);
  }

  static Tensor scalar(double v, bool tracked = false) { return Tensor(Shape{}, {v}, tracked); }

  /// Leaf that participates in gradient computation.
  static Tensor parameter(Shape shape, std::vector<double> values) {
    return Tensor(std::move(shape), std::move(values), true);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  bool tracked() const { return node_->tracked; }
  bool is_leaf() const { return node_->parents.empty(); }

  std::span<const double> data() const { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }

  /// Mutable storage of a leaf parameter. Used by optimizers and the
  /// finite-difference checker between graph constructions; never on an
  /// interior node.
  std::vector<double>& leaf_data() {
    if (!is_leaf()) throw Error("leaf_data() called on an interior tensor");
    return node_->value;
  }

  /// Deep copy with independent storage and no graph history.
  Tensor clone(bool tracked) const { return Tensor(shape(), node_->value, tracked); }
  Tensor detach() const { return clone(false); }

  const detail::Node* id() const { return node_.get(); }

  /// Builds an op result. When no input is tracked the closure is dropped and
  /// the result is a plain constant.
  static Tensor from_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                        detail::BackwardFn backward) {
    Tensor out(std::move(shape), std::move(values));
    bool any = false;
    for (const auto& in : inputs) any = any || in.tracked();
    if (any) {
      out.node_->tracked = true;
      out.node_->parents.reserve(inputs.size());
      for (auto& in : inputs) out.node_->parents.push_back(std::move(in.node_));
      out.node_->backward = std::move(backward);
    }
    return out;
  }

private:
  friend std::unordered_map<const detail::Node*, std::vector<double>> backward_all(const Tensor&);
  std::shared_ptr<detail::Node> node_;
};

/// Named parameter tensors, iterated in sorted name order.
using ParamSet = std::map<std::string, Tensor>;
/// Gradient per parameter name, same layout as the parameter.
using Gradients = std::map<std::string, std::vector<double>>;

/// Reverse sweep from a scalar; returns gradient buffers keyed by node.
inline std::unordered_map<const detail::Node*, std::vector<double>> backward_all(const Tensor& loss) {
  using detail::Node;
  if (loss.numel() != 1) throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
  std::unordered_map<const Node*, std::vector<double>> grads;
  if (!loss.tracked()) return grads;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<Node*> order;
  std::unordered_map<const Node*, bool> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node_.get(), 0);
  visited[loss.node_.get()] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->tracked && !visited[parent]) {
        visited[parent] = true;
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  grads[loss.node_.get()] = std::vector<double>{1.0};
  std::vector<std::vector<double>*> parent_bufs;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->parents.empty()) continue;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    // The node's own buffer must stay valid while parents' buffers are
    // inserted, so move it out first.
    std::vector<double> out_grad = std::move(found->second);
    parent_bufs.assign(node->parents.size(), nullptr);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      Node* p = node->parents[i].get();
      if (!p->tracked) continue;
      auto& buf = grads[p];
      if (buf.empty()) buf.assign(p->value.size(), 0.0);
    }
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      Node* p = node->parents[i].get();
      if (p->tracked) parent_bufs[i] = &grads[p];
    }
    node->backward(out_grad, parent_bufs);
    // Interior gradients are no longer needed once propagated.
    grads.erase(node);
  }
  return grads;
}

/// Exact reverse-mode gradients of `loss` for every entry of `params`.
/// Parameters the loss does not depend on receive zeros.
inline Gradients backward(const Tensor& loss, const ParamSet& params) {
  auto all = backward_all(loss);
  Gradients out;
  for (const auto& [name, p] : params) {
    auto it = all.find(p.id());
    if (it != all.end() && !it->second.empty()) {
      out.emplace(name, std::move(it->second));
    } else {
      out.emplace(name, std::vector<double>(p.numel(), 0.0));
    }
  }
  return out;
}

}  // namespace kari::nc
