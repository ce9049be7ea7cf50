#include "avf/diffcore/grad_check.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

namespace avf::diff {
namespace {

double evaluate(const LossBuilder& fn, ParamStore store) {
  try {
    Tape tape;
    Var loss = fn(tape, store);
    return loss.value().item();
  } catch (const std::domain_error&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& fn, const ParamStore& point, const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");

  GradMap analytic;
  {
    ParamStore copy = point;
    Tape tape;
    Var loss = fn(tape, copy);
    tape.backward(loss);
    analytic = tape.gradients(copy);
  }

  struct Slot {
    std::size_t entry;
    std::size_t count;
  };
  std::vector<Slot> slots;
  std::size_t total = 0;
  for (std::size_t i = 0; i < point.entries().size(); ++i) {
    const auto& e = point.entries()[i];
    if (!e.trainable) continue;
    slots.push_back({i, e.value.numel()});
    total += e.value.numel();
  }
  GradCheckReport report;
  if (total == 0) return report;

  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  const int max_attempts = options.samples * 50;
  int attempts = 0;
  while (report.checked + report.skipped < options.samples && attempts++ < max_attempts) {
    std::size_t flat = pick(rng);
    std::size_t k = 0;
    while (flat >= slots[k].count) flat -= slots[k++].count;
    const auto& entry = point.entries()[slots[k].entry];
    const double x0 = entry.value[flat];
    if (options.exclude && options.exclude(entry.name, flat, x0)) continue;

    ParamStore plus = point;
    plus.at(entry.name)[flat] = x0 + options.eps;
    ParamStore minus = point;
    minus.at(entry.name)[flat] = x0 - options.eps;
    const double fp = evaluate(fn, std::move(plus));
    const double fm = evaluate(fn, std::move(minus));
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      ++report.skipped;
      continue;
    }
    const double numeric = (fp - fm) / (2.0 * options.eps);
    const double a = analytic.at(entry.name)[flat];
    const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    ++report.checked;
    if (err >= report.max_rel_error) {
      report.max_rel_error = err;
      report.worst = entry.name + "[" + std::to_string(flat) + "]";
    }
  }
  return report;
}

}  // namespace avf::diff
