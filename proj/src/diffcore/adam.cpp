#include "avf/diffcore/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace avf::diff {

bool operator==(const AdamState& a, const AdamState& b) {
  return a.beta1 == b.beta1 && a.beta2 == b.beta2 && a.eps == b.eps && a.step == b.step && a.m == b.m && a.v == b.v;
}

void adam_update(ParamStore& params, const GradMap& grads, AdamState& state, double lr) {
  for (const auto& [name, g] : grads) {
    const Tensor& p = params.at(name);
    if (p.shape() != g.shape()) {
      throw std::invalid_argument("adam: gradient for '" + name + "' has shape " + shape_str(g.shape()) +
                                  ", parameter has " + shape_str(p.shape()));
    }
    if (!params.trainable(name)) throw std::invalid_argument("adam: '" + name + "' is not trainable");
    if (auto it = state.m.find(name); it != state.m.end() && it->second.shape() != p.shape()) {
      throw std::invalid_argument("adam: moment shape mismatch for '" + name + "'");
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto [mit, m_new] = state.m.try_emplace(name, Tensor(p.shape()));
    auto [vit, v_new] = state.v.try_emplace(name, Tensor(p.shape()));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace avf::diff
