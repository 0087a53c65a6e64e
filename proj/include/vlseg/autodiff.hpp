#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vlseg/errors.hpp"
#include "vlseg/tensor.hpp"

namespace vlseg {

/// A learnable tensor that outlives any single tape.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad() { grad = Tensor(value.shape()); }
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode gradient tape.
///
/// Nodes are appended in evaluation order, so parents always precede children
/// and a reverse sweep over the node list is a valid topological order. A tape
/// is meant to be used for one forward/backward pass; parameters bound with
/// param() receive their gradients when backward() finishes.
class Tape {
 public:
  /// Called during the reverse sweep with the id of the node being processed.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, nullptr, {}); }

  /// A leaf that collects a gradient but is not tied to a Parameter.
  Var leaf(Tensor value) { return push(std::move(value), true, nullptr, {}); }

  Var param(Parameter& p) { return push(p.value, true, &p, {}); }

  /// Append an op result. `fn` is dropped when no parent requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : parents) needs = needs || nodes_.at(v.id()).requires_grad;
    return push(std::move(value), needs, nullptr, needs ? std::move(fn) : BackwardFn{});
  }

  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : parents) needs = needs || nodes_.at(v.id()).requires_grad;
    return push(std::move(value), needs, nullptr, needs ? std::move(fn) : BackwardFn{});
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  /// Gradient of a node, materialized as zeros on first access.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }
  Tensor& grad(const Var& v) { return grad(v.id()); }

  /// True when a backward rule should push gradient into `id`.
  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  void backward(const Var& loss) {
    if (loss.value().numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    grad(loss.id()).fill(1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
    }
    for (Node& n : nodes_) {
      if (n.param == nullptr || n.grad.empty()) continue;
      if (n.param->grad.shape() != n.value.shape()) n.param->zero_grad();
      n.param->grad += n.grad;
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, Parameter* param, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, param, std::move(fn)});
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

}  // namespace vlseg
