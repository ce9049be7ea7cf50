#pragma once

#include <deque>
#include <functional>
#include <map>
#include <tuple>
#include <string>
#include <utility>
#include <vector>

#include "avf/diffcore/param_store.hpp"
#include "avf/diffcore/tensor.hpp"

namespace avf::diff {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape& tape() const { return *tape_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Records a computation for one reverse sweep. Nodes are appended in
/// evaluation order, so reverse creation order is a valid topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf without gradient.
  Var constant(Tensor value);
  /// Leaf tracked for gradients, keyed by (store, name). Repeated calls return the same Var.
  Var param(const ParamStore& store, const std::string& name);
  /// Leaf read from a store but excluded from differentiation. Cached like param().
  Var frozen(const ParamStore& store, const std::string& name);

  Var record(Tensor value, std::vector<int> parents, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and sweeps. Loss must hold a single element.
  void backward(const Var& loss);

  /// Gradient of the last backward sweep w.r.t. every trainable entry of store.
  /// Unreachable entries get zero tensors.
  GradMap gradients(const ParamStore& store) const;
  /// Gradient w.r.t. an arbitrary recorded value (zeros if unreachable).
  Tensor grad_of(const Var& v) const;

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  /// Gradient buffer of a node, allocated as zeros on first access.
  Tensor& grad(int id);
  const Tensor& incoming(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::deque<Node> nodes_;
  std::map<std::tuple<const ParamStore*, std::string, bool>, int> params_;
};

}  // namespace avf::diff
