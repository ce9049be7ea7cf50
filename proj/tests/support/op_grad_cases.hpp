#pragma once

// Random small-tensor gradient cases for every catalog op. Shared by the
// diffcore unit tests and the acceptance suite.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "avf/diffcore/grad_check.hpp"
#include "avf/diffcore/ops.hpp"

namespace avf::testing {

struct OpGradCase {
  diff::OpKind kind;
  diff::ParamStore inputs;
  diff::OpAttrs attrs;
  diff::GradCheckOptions options;
};

inline diff::Tensor random_tensor(diff::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  diff::Tensor t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (double& v : t.values()) v = d(rng);
  return t;
}

inline OpGradCase make_op_case(diff::OpKind kind, std::uint64_t seed) {
  using diff::OpKind;
  std::mt19937_64 rng(seed);
  OpGradCase c{kind, diff::ParamStore(seed), {}, {}};
  c.options.eps = 1e-5;
  c.options.samples = 32;
  c.options.seed = seed;
  auto in = [&](const std::string& name, diff::Shape s, double lo = -1.0, double hi = 1.0) {
    c.inputs.add(name, random_tensor(std::move(s), rng, lo, hi));
  };
  switch (kind) {
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul:
      in("a", {3, 4});
      in("b", {3, 4});
      break;
    case OpKind::Scale:
    case OpKind::AddScalar:
      c.attrs.scalar = -1.7;
      in("x", {2, 5});
      break;
    case OpKind::Square:
    case OpKind::Exp:
    case OpKind::Sigmoid:
    case OpKind::Tanh:
    case OpKind::Softmax:
    case OpKind::Sum:
    case OpKind::Mean:
      in("x", {3, 5});
      break;
    case OpKind::Log:
      in("x", {3, 5}, 0.2, 2.0);
      break;
    case OpKind::Clamp:
      c.attrs.lo = -0.5;
      c.attrs.hi = 0.5;
      in("x", {4, 4});
      c.options.exclude = [](const std::string&, std::size_t, double v) {
        return std::abs(v - 0.5) < 1e-3 || std::abs(v + 0.5) < 1e-3;
      };
      break;
    case OpKind::LeakyRelu:
      c.attrs.scalar = 0.2;
      in("x", {4, 4});
      c.options.exclude = [](const std::string&, std::size_t, double v) { return std::abs(v) < 1e-3; };
      break;
    case OpKind::Linear:
      in("x", {3, 4});
      in("w", {4, 5});
      in("b", {5});
      break;
    case OpKind::MatMul:
      in("a", {3, 4});
      in("b", {4, 2});
      break;
    case OpKind::BatchMatMul:
      c.attrs.trans_a = (seed % 2) == 1;
      c.attrs.trans_b = (seed % 3) != 0;
      in("a", c.attrs.trans_a ? diff::Shape{2, 4, 3} : diff::Shape{2, 3, 4});
      in("b", c.attrs.trans_b ? diff::Shape{2, 5, 4} : diff::Shape{2, 4, 5});
      break;
    case OpKind::Concat:
      c.attrs.axis = 1;
      in("a", {2, 3, 2});
      in("b", {2, 1, 2});
      in("c", {2, 2, 2});
      break;
    case OpKind::Slice:
      c.attrs.axis = 1;
      c.attrs.start = 1;
      c.attrs.length = 2;
      in("x", {2, 4, 3});
      break;
    case OpKind::Reshape:
      c.attrs.shape = {6, 2};
      in("x", {3, 4});
      break;
    case OpKind::Permute:
      c.attrs.perm = {2, 0, 1};
      in("x", {2, 3, 4});
      break;
    case OpKind::Conv2d:
      in("x", {2, 2, 6, 6});
      in("w", {3, 2, 4, 4}, -0.5, 0.5);
      in("b", {3});
      break;
    case OpKind::Deconv2d:
      in("x", {2, 3, 3, 3});
      in("w", {3, 2, 4, 4}, -0.5, 0.5);
      in("b", {2});
      break;
    case OpKind::BatchNorm2dTrain:
      in("x", {3, 2, 3, 3});
      in("gamma", {2}, 0.5, 1.5);
      in("beta", {2});
      break;
    case OpKind::BatchNorm2dInfer:
      in("x", {2, 2, 3, 3});
      in("gamma", {2}, 0.5, 1.5);
      in("beta", {2});
      c.attrs.running_mean = random_tensor({2}, rng);
      c.attrs.running_var = random_tensor({2}, rng, 0.5, 2.0);
      break;
    case OpKind::LstmCell:
      in("x", {2, 3});
      in("h", {2, 4});
      in("c", {2, 4});
      in("w", {7, 16}, -0.5, 0.5);
      in("b", {16});
      break;
  }
  return c;
}

/// Loss = sum(op(inputs) * fixed random weights) so that every output
/// element contributes a distinct gradient.
inline diff::LossBuilder op_case_loss(const OpGradCase& c) {
  return [kind = c.kind, attrs = c.attrs](diff::Tape& tape, diff::ParamStore& store) {
    std::vector<diff::Var> vars;
    for (const auto& e : store.entries()) vars.push_back(tape.param(store, e.name));
    diff::Var out = diff::apply(kind, attrs, vars);
    std::mt19937_64 wrng(1234);
    diff::Tensor w = random_tensor(out.shape(), wrng);
    return diff::sum(diff::mul(out, tape.constant(std::move(w))));
  };
}

}  // namespace avf::testing
