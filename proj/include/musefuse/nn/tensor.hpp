#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "musefuse/error.hpp"

namespace musefuse::nn {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& s) { return std::accumulate(s.begin(), s.end(), Index{1}, std::multiplies<>()); }

inline std::string to_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out + "]";
}

template <typename Scalar>
using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

/// Graph node. Values are contiguous, row-major over `shape` (N x C x H x W for 4-D).
template <typename Scalar>
struct Node {
  Shape shape;
  Buffer<Scalar> value;
  Buffer<Scalar> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // accumulates this->grad into parents

  Buffer<Scalar>& ensure_grad() {
    if (grad.size() != value.size()) grad = Buffer<Scalar>::Zero(value.size());
    return grad;
  }
};

/// Graph recording is skipped while a NoGradGuard is alive on this thread.
inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Shared handle to a graph node. Copies alias the same storage.
template <typename Scalar>
class Tensor {
 public:
  using NodeT = Node<Scalar>;

  Tensor() : node_(std::make_shared<NodeT>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.node_->value = Buffer<Scalar>::Zero(nn::numel(shape));
    t.node_->shape = std::move(shape);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, Scalar v, bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    t.node_->value.setConstant(v);
    return t;
  }

  static Tensor from(Shape shape, Buffer<Scalar> values, bool requires_grad = false) {
    if (values.size() != nn::numel(shape)) {
      throw Error(ErrorCode::ShapeMismatch, "data length " + std::to_string(values.size()) + " vs shape " + to_string(shape));
    }
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t ndim() const { return node_->shape.size(); }
  Index numel() const { return node_->value.size(); }

  Buffer<Scalar>& value() { return node_->value; }
  const Buffer<Scalar>& value() const { return node_->value; }
  Scalar item() const { return node_->value[0]; }
  Scalar* data() { return node_->value.data(); }
  const Scalar* data() const { return node_->value.data(); }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  Buffer<Scalar>& grad() { return node_->ensure_grad(); }
  const Buffer<Scalar>& grad() const { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.resize(0); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  /// Same values, no graph history.
  Tensor detach() const { return from(shape(), value(), false); }

  const std::shared_ptr<NodeT>& node() const { return node_; }

  /// Builds an op result. Records `backward` only when some input needs a gradient.
  static Tensor make_result(Shape shape, Buffer<Scalar> value, std::vector<Tensor> inputs,
                            std::function<void(NodeT&)> backward) {
    Tensor out = from(std::move(shape), std::move(value), false);
    if (!grad_enabled()) return out;
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (!any) return out;
    out.node_->requires_grad = true;
    for (auto& in : inputs) out.node_->parents.push_back(in.node_);
    out.node_->backward_fn = std::move(backward);
    return out;
  }

  /// Reverse-mode sweep from a scalar. Leaf gradients accumulate; the
  /// recorded graph below this tensor is released afterwards.
  void backward() {
    if (numel() != 1) throw Error(ErrorCode::ShapeMismatch, "backward() needs a scalar, got " + to_string(shape()));
    if (!node_->requires_grad) throw Error(ErrorCode::NoGraph, "tensor does not depend on any parameter");
    // `order` owns the nodes so that clearing parent links cannot free a node still to be visited.
    std::vector<std::shared_ptr<NodeT>> order;
    std::unordered_set<NodeT*> seen;
    std::vector<std::pair<std::shared_ptr<NodeT>, std::size_t>> stack{{node_, 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        auto p = n->parents[i++];
        if (p->requires_grad && seen.insert(p.get()).second) stack.emplace_back(std::move(p), 0);
      } else {
        order.push_back(std::move(n));
        stack.pop_back();
      }
    }
    node_->ensure_grad().setOnes();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      NodeT* n = it->get();
      if (n->backward_fn) {
        n->backward_fn(*n);
        n->backward_fn = nullptr;
        n->parents.clear();
      }
    }
  }

 private:
  explicit Tensor(std::shared_ptr<NodeT> n) : node_(std::move(n)) {}
  std::shared_ptr<NodeT> node_;
};

template <typename Scalar>
Buffer<Scalar>& parent_grad(Node<Scalar>& n, std::size_t i) {
  return n.parents[i]->ensure_grad();
}

/// Adds `delta` to parent i's gradient; the first contribution is assigned
/// directly, so the buffer is never zero-filled just to be added to.
template <typename Scalar, typename Expr>
void accumulate_grad(Node<Scalar>& n, std::size_t i, const Expr& delta) {
  auto& p = *n.parents[i];
  if (p.grad.size() != p.value.size()) {
    p.grad = delta;
  } else {
    p.grad += delta;
  }
}

template <typename Scalar>
void accumulate_grad(Node<Scalar>& n, std::size_t i, Buffer<Scalar>&& delta) {
  auto& p = *n.parents[i];
  if (p.grad.size() != p.value.size()) {
    p.grad = std::move(delta);
  } else {
    p.grad += delta;
  }
}

template <typename Scalar>
bool parent_wants_grad(const Node<Scalar>& n, std::size_t i) {
  return n.parents[i]->requires_grad;
}

}  // namespace musefuse::nn
