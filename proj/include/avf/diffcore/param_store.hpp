#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "avf/diffcore/tensor.hpp"

namespace avf::diff {

using GradMap = std::map<std::string, Tensor>;

/// Named parameter tensors in construction order. Non-trainable entries hold
/// buffers such as batch-norm running statistics.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    bool trainable = true;
  };

  explicit ParamStore(std::uint64_t rng_seed = 0) : rng_seed_(rng_seed), rng_(rng_seed) {}

  Tensor& add(const std::string& name, Tensor value, bool trainable = true);
  /// Uniform(-bound, bound) initialisation drawn from the store's generator.
  Tensor& add_uniform(const std::string& name, Shape shape, double bound);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool trainable(const std::string& name) const;

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t trainable_count() const;

  std::uint64_t rng_seed() const { return rng_seed_; }

 private:
  std::uint64_t rng_seed_;
  std::mt19937_64 rng_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

bool operator==(const ParamStore& a, const ParamStore& b);

double global_norm(const GradMap& grads);
/// Rescales grads in place so their global L2 norm is at most max_norm. Returns the norm before clipping.
double clip_global_norm(GradMap& grads, double max_norm);

}  // namespace avf::diff
