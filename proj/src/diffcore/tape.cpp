#include "avf/diffcore/tape.hpp"

#include <stdexcept>

namespace avf::diff {

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("var: unbound");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw std::invalid_argument("tape: non-finite constant " + shape_str(value.shape()));
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::param(const ParamStore& store, const std::string& name) {
  auto key = std::make_tuple(&store, name, true);
  if (auto it = params_.find(key); it != params_.end()) return Var(this, it->second);
  const Tensor& t = store.at(name);
  if (!t.all_finite()) throw std::invalid_argument("tape: parameter '" + name + "' is not finite");
  Node n;
  n.value = t;
  n.requires_grad = store.trainable(name);
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size() - 1);
  params_.emplace(std::move(key), id);
  return Var(this, id);
}

Var Tape::frozen(const ParamStore& store, const std::string& name) {
  auto key = std::make_tuple(&store, name, false);
  if (auto it = params_.find(key); it != params_.end()) return Var(this, it->second);
  Var v = constant(store.at(name));
  params_.emplace(std::move(key), v.id());
  return v;
}

Var Tape::record(Tensor value, std::vector<int> parents, BackwardFn backward) {
  if (!value.all_finite()) {
    throw std::domain_error("tape: operation produced non-finite values, shape " + shape_str(value.shape()));
  }
  Node n;
  n.value = std::move(value);
  for (int p : parents) {
    if (nodes_[static_cast<std::size_t>(p)].requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) {
    n.parents = std::move(parents);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Tensor& Tape::grad(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(const Var& loss) {
  if (&loss.tape() != this) throw std::invalid_argument("backward: loss recorded on another tape");
  if (loss.value().numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  if (!requires_grad(loss.id())) return;
  grad(loss.id())[0] = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, id);
  }
}

GradMap Tape::gradients(const ParamStore& store) const {
  GradMap out;
  for (const auto& e : store.entries()) {
    if (!e.trainable) continue;
    auto it = params_.find(std::make_tuple(&store, e.name, true));
    if (it != params_.end() && !nodes_[static_cast<std::size_t>(it->second)].grad.empty()) {
      out.emplace(e.name, nodes_[static_cast<std::size_t>(it->second)].grad);
    } else {
      out.emplace(e.name, Tensor(e.value.shape()));
    }
  }
  return out;
}

Tensor Tape::grad_of(const Var& v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (n.grad.empty()) return Tensor(n.value.shape());
  return n.grad;
}

}  // namespace avf::diff
