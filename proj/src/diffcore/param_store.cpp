#include "avf/diffcore/param_store.hpp"

#include <cmath>
#include <stdexcept>

namespace avf::diff {

Tensor& ParamStore::add(const std::string& name, Tensor value, bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("param store: duplicate name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{name, std::move(value), trainable});
  return entries_.back().value;
}

Tensor& ParamStore::add_uniform(const std::string& name, Shape shape, double bound) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.values()) v = dist(rng_);
  return add(name, std::move(t), true);
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("param store: no entry '" + name + "'");
  return entries_[it->second].value;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("param store: no entry '" + name + "'");
  return entries_[it->second].value;
}

bool ParamStore::trainable(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("param store: no entry '" + name + "'");
  return entries_[it->second].trainable;
}

std::size_t ParamStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.trainable) n += e.value.numel();
  }
  return n;
}

bool operator==(const ParamStore& a, const ParamStore& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.entries()[i];
    const auto& y = b.entries()[i];
    if (x.name != y.name || x.trainable != y.trainable || !(x.value == y.value)) return false;
  }
  return true;
}

double global_norm(const GradMap& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads) {
    for (double v : g.values()) s += v * v;
  }
  return std::sqrt(s);
}

double clip_global_norm(GradMap& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (auto& [name, g] : grads) {
      for (double& v : g.values()) v *= scale;
    }
  }
  return norm;
}

}  // namespace avf::diff
