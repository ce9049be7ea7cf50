#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "avf/diffcore/param_store.hpp"
#include "avf/diffcore/tape.hpp"

namespace avf::diff {

/// Builds a scalar loss on the tape from parameters read out of the store.
/// The store is a private copy; side effects on buffers are discarded.
using LossBuilder = std::function<Var(Tape&, ParamStore&)>;

struct GradCheckOptions {
  double eps = 1e-5;
  int samples = 32;
  std::uint64_t seed = 0;
  /// Coordinates for which this returns true are never sampled (e.g. kinks).
  std::function<bool(const std::string& name, std::size_t index, double value)> exclude;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  int checked = 0;
  int skipped = 0;  // perturbed loss was non-finite
  std::string worst;  // "name[index]" of the worst coordinate
};

/// Compares reverse-mode gradients against central differences on randomly
/// sampled trainable coordinates. Error is |analytic - numeric| / max(1, |analytic|).
GradCheckReport grad_check(const LossBuilder& fn, const ParamStore& point, const GradCheckOptions& options = {});

}  // namespace avf::diff
