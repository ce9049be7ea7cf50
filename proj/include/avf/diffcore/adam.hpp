#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "avf/diffcore/param_store.hpp"

namespace avf::diff {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

bool operator==(const AdamState& a, const AdamState& b);

/// Bias-corrected ADAM step over the parameters named in grads. Moments are
/// created lazily; the step counter advances once per call.
void adam_update(ParamStore& params, const GradMap& grads, AdamState& state, double lr);

}  // namespace avf::diff
