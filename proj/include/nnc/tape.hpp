#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nnc/tensor.hpp"

namespace nnc {

/// Negative-test hook. A nonzero value scales every backward seed by
/// (1 + value), so gradient checks must fail. Zero in normal operation.
inline double& backward_fault() {
  static double fault = 0.0;
  return fault;
}

template <typename T>
class Tape;

/// Handle to a tensor recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

/// Linear record of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so a node's inputs always have
/// smaller ids. backward() walks ids downward from the loss and calls each
/// node's rule once. Nodes that no differentiable leaf reaches carry no rule
/// and never receive a gradient buffer.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}, false});
    return {this, nodes_.size() - 1};
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Copy of x's value with no gradient path.
  Var<T> detach(Var<T> x) { return constant(x.value()); }

  /// Appends an op output. The rule is dropped when no input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<std::size_t> inputs, BackwardFn fn) {
    bool needs = false;
    for (std::size_t in : inputs) needs = needs || nodes_.at(in).requires_grad;
    return record_impl(std::move(value), needs, std::move(fn));
  }

  Var<T> record(Tensor<T> value, const std::vector<std::size_t>& inputs, BackwardFn fn) {
    bool needs = false;
    for (std::size_t in : inputs) needs = needs || nodes_.at(in).requires_grad;
    return record_impl(std::move(value), needs, std::move(fn));
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates. Returns how many rules ran.
  std::size_t backward(Var<T> loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: variable belongs to another tape");
    if (value(loss.id).size() != 1) {
      shape_fail("backward", "loss must be a scalar, got " + to_string(value(loss.id).shape()));
    }
    for (auto& n : nodes_) {
      if (n.has_grad) n.grad.fill(T{0});
    }
    if (!nodes_[loss.id].requires_grad) return 0;
    grad_ref(loss.id).fill(T{1} + static_cast<T>(backward_fault()));
    std::size_t visited = 0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
      ++visited;
    }
    return visited;
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Mutable gradient buffer, allocated as zeros on first use.
  Tensor<T>& grad_ref(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Gradient after backward(); exact zeros when unreached.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    if (n.has_grad) return n.grad;
    return Tensor<T>(n.value.shape());
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Running hash of every piecewise op's branch choice (ReLU active or not).
  /// Two evaluations with equal hashes took the same smooth piece.
  void note_branch(bool taken) noexcept { branches_ = (branches_ ^ (taken ? 2u : 1u)) * 1099511628211ull; }
  std::uint64_t branch_signature() const noexcept { return branches_; }

  void warn(std::string msg) { warnings_.push_back(std::move(msg)); }
  const std::vector<std::string>& warnings() const noexcept { return warnings_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    bool has_grad = false;
  };

  Var<T> record_impl(Tensor<T> value, bool needs, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : BackwardFn{}, false});
    return {this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
  std::vector<std::string> warnings_;
  std::uint64_t branches_ = 14695981039346656037ull;
};

}  // namespace nnc
