#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "avf/diffcore/tape.hpp"

// Differentiable operation catalog. Every op checks its shape rule and throws
// std::invalid_argument naming the offending dimension on mismatch.
namespace avf::diff {

// Elementwise arithmetic. Binary ops require identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var add_scalar(const Var& x, double s);
Var square(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
/// Gradient passes where lo <= x <= hi, zero elsewhere.
Var clamp(const Var& x, double lo, double hi);

// Activations. Kinks take the right derivative.
Var leaky_relu(const Var& x, double slope);
Var sigmoid(const Var& x);
Var tanh(const Var& x);
/// Softmax over the last axis.
Var softmax(const Var& x);

// Dense algebra.
/// x [..., in] * w [in, out] + b [out].
Var linear(const Var& x, const Var& w, const Var& b);
/// a [M, K] * b [K, N].
Var matmul(const Var& a, const Var& b);
/// Batched product over the leading axis of rank-3 operands, optionally transposing either side.
Var bmm(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);

// Layout.
Var concat(std::span<const Var> parts, int axis);
Var slice(const Var& x, int axis, int start, int length);
Var reshape(const Var& x, Shape shape);
Var permute(const Var& x, const std::vector<int>& perm);

// Reductions to a single-element tensor.
Var sum(const Var& x);
Var mean(const Var& x);

struct ConvGeometry {
  int kernel = 4;
  int stride = 2;
  int pad = 1;
};

/// x [N, Cin, H, W], w [Cout, Cin, k, k], b [Cout].
Var conv2d(const Var& x, const Var& w, const Var& b, ConvGeometry g = {});
/// Transposed convolution. x [N, Cin, H, W], w [Cin, Cout, k, k], b [Cout].
Var deconv2d(const Var& x, const Var& w, const Var& b, ConvGeometry g = {});

struct BatchNormResult {
  Var out;
  Tensor batch_mean;     // per channel
  Tensor batch_var;      // per channel, unbiased
};
/// Per-batch statistics over (N, H, W) for each channel.
BatchNormResult batch_norm2d_train(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Running statistics; an affine map of x.
Var batch_norm2d_infer(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
                       const Tensor& running_var, double eps = 1e-5);

struct LstmOutput {
  Var h;
  Var c;
};
/// One LSTM step. x [N, in], h/c [N, H], w [in + H, 4H] with gate order (input, forget, cell, output), b [4H].
LstmOutput lstm_cell(const Var& x, const Var& h, const Var& c, const Var& w, const Var& b);

/// Kinds addressable through the generic forward() entry point.
enum class OpKind {
  Add, Sub, Mul, Scale, AddScalar, Square, Exp, Log, Clamp,
  LeakyRelu, Sigmoid, Tanh, Softmax,
  Linear, MatMul, BatchMatMul,
  Concat, Slice, Reshape, Permute,
  Sum, Mean,
  Conv2d, Deconv2d, BatchNorm2dTrain, BatchNorm2dInfer, LstmCell,
};

std::string_view op_name(OpKind kind);
const std::vector<OpKind>& op_catalog();

struct OpAttrs {
  double scalar = 0.0;      // Scale, AddScalar, LeakyRelu slope
  double lo = 0.0, hi = 0.0;
  int axis = 0;
  int start = 0, length = 0;
  bool trans_a = false, trans_b = false;
  Shape shape;
  std::vector<int> perm;
  ConvGeometry conv;
  double eps = 1e-5;
  Tensor running_mean, running_var;
};

/// Applies a catalog op on a tape. LstmCell returns concat([h, c], axis 1).
Var apply(OpKind kind, const OpAttrs& attrs, std::span<const Var> inputs);
/// Evaluates a catalog op without recording gradients.
Tensor forward(OpKind kind, const OpAttrs& attrs, std::span<const Tensor> inputs);

}  // namespace avf::diff
