#include "avf/diffcore/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace avf::diff {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// C[M,N] (+)= op(A) * op(B); A is stored [K,M] when ta, B is stored [N,K] when tb.
void gemm(bool ta, bool tb, int M, int N, int K, const double* A, const double* B, double* C, bool accumulate) {
  ConstMapMat a(A, ta ? K : M, ta ? M : K);
  ConstMapMat b(B, tb ? N : K, tb ? K : N);
  MapMat c(C, M, N);
  if (!accumulate) c.setZero();
  if (!ta && !tb) {
    c.noalias() += a * b;
  } else if (ta && !tb) {
    c.noalias() += a.transpose() * b;
  } else if (!ta && tb) {
    c.noalias() += a * b.transpose();
  } else {
    c.noalias() += a.transpose() * b.transpose();
  }
}

[[noreturn]] void shape_error(std::string_view op, const std::string& what) {
  throw std::invalid_argument(std::string(op) + ": " + what);
}

void require_same(std::string_view op, const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) shape_error(op, "operands recorded on different tapes");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size()) {
    shape_error(op, "rank mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  }
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (sa[i] != sb[i]) {
      shape_error(op, "dimension " + std::to_string(i) + " mismatch (" + std::to_string(sa[i]) + " vs " +
                          std::to_string(sb[i]) + ")");
    }
  }
}

void require_rank(std::string_view op, const Var& x, int rank, const char* name) {
  if (x.value().rank() != rank) {
    shape_error(op, std::string(name) + " must have rank " + std::to_string(rank) + ", got " + shape_str(x.shape()));
  }
}

int normalize_axis(std::string_view op, int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) shape_error(op, "axis " + std::to_string(axis) + " out of range");
  return axis;
}

template <class F, class DF>
Var unary(const Var& x, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) y[i] = f(xv[i]);
  const int xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi, df](Tape& t, int self) {
    const Tensor& xv = t.value(xi);
    const Tensor& yv = t.value(self);
    const Tensor& gy = t.incoming(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i] * df(xv[i], yv[i]);
  });
}

void im2col(const double* img, int C, int H, int W, int k, int s, int p, int Ho, int Wo, double* col) {
  const int cols = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * cols;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * s - p + ky;
          double* out = row + oy * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(out, out + Wo, 0.0);
            continue;
          }
          const double* in = img + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * s - p + kx;
            out[ox] = (ix >= 0 && ix < W) ? in[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* col, int C, int H, int W, int k, int s, int p, int Ho, int Wo, double* img) {
  const int cols = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * cols;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * s - p + ky;
          if (iy < 0 || iy >= H) continue;
          double* out = img + (static_cast<std::size_t>(c) * H + iy) * W;
          const double* in = row + oy * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * s - p + kx;
            if (ix >= 0 && ix < W) out[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same("add", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = av[i] + bv[i];
  const int ai = a.id(), bi = b.id();
  return a.tape().record(std::move(y), {ai, bi}, [ai, bi](Tape& t, int self) {
    const Tensor& gy = t.incoming(self);
    for (int id : {ai, bi}) {
      if (!t.requires_grad(id)) continue;
      Tensor& g = t.grad(id);
      for (std::size_t i = 0; i < gy.numel(); ++i) g[i] += gy[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same("sub", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = av[i] - bv[i];
  const int ai = a.id(), bi = b.id();
  return a.tape().record(std::move(y), {ai, bi}, [ai, bi](Tape& t, int self) {
    const Tensor& gy = t.incoming(self);
    if (t.requires_grad(ai)) {
      Tensor& g = t.grad(ai);
      for (std::size_t i = 0; i < gy.numel(); ++i) g[i] += gy[i];
    }
    if (t.requires_grad(bi)) {
      Tensor& g = t.grad(bi);
      for (std::size_t i = 0; i < gy.numel(); ++i) g[i] -= gy[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same("mul", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = av[i] * bv[i];
  const int ai = a.id(), bi = b.id();
  return a.tape().record(std::move(y), {ai, bi}, [ai, bi](Tape& t, int self) {
    const Tensor& gy = t.incoming(self);
    if (t.requires_grad(ai)) {
      const Tensor& bv = t.value(bi);
      Tensor& g = t.grad(ai);
      for (std::size_t i = 0; i < gy.numel(); ++i) g[i] += gy[i] * bv[i];
    }
    if (t.requires_grad(bi)) {
      const Tensor& av = t.value(ai);
      Tensor& g = t.grad(bi);
      for (std::size_t i = 0; i < gy.numel(); ++i) g[i] += gy[i] * av[i];
    }
  });
}

Var scale(const Var& x, double s) {
  return unary(x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& x, double s) {
  return unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Var square(const Var& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var exp(const Var& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(const Var& x) {
  for (double v : x.value().values()) {
    if (!(v > 0.0)) throw std::domain_error("log: non-positive input");
  }
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var clamp(const Var& x, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& x, double slope) {
  return unary(
      x, [slope](double v) { return v >= 0.0 ? v : slope * v; },
      [slope](double v, double) { return v >= 0.0 ? 1.0 : slope; });
}

Var sigmoid(const Var& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var softmax(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() < 1) shape_error("softmax", "rank 0 input");
  const int n = xv.shape().back();
  const std::size_t rows = xv.numel() / static_cast<std::size_t>(n);
  Tensor y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    double* out = y.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (int i = 0; i < n; ++i) {
      out[i] = std::exp(in[i] - mx);
      z += out[i];
    }
    for (int i = 0; i < n; ++i) out[i] /= z;
  }
  const int xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi, n, rows](Tape& t, int self) {
    const Tensor& yv = t.value(self);
    const Tensor& gy = t.incoming(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = yv.data() + r * n;
      const double* gr = gy.data() + r * n;
      double dot = 0.0;
      for (int i = 0; i < n; ++i) dot += gr[i] * yr[i];
      double* out = gx.data() + r * n;
      for (int i = 0; i < n; ++i) out[i] += yr[i] * (gr[i] - dot);
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank("linear", w, 2, "weight");
  require_rank("linear", b, 1, "bias");
  const int in = wv.dim(0), out = wv.dim(1);
  if (xv.rank() < 1 || xv.shape().back() != in) {
    shape_error("linear", "input last dimension " + std::to_string(xv.rank() ? xv.shape().back() : 0) +
                              " does not match weight rows " + std::to_string(in));
  }
  if (b.value().dim(0) != out) {
    shape_error("linear", "bias dimension 0 is " + std::to_string(b.value().dim(0)) + ", expected " +
                              std::to_string(out));
  }
  const int rows = static_cast<int>(xv.numel() / static_cast<std::size_t>(in));
  Shape ys = xv.shape();
  ys.back() = out;
  Tensor y(ys);
  const Tensor& bv = b.value();
  for (int r = 0; r < rows; ++r) std::copy(bv.data(), bv.data() + out, y.data() + static_cast<std::size_t>(r) * out);
  gemm(false, false, rows, out, in, xv.data(), wv.data(), y.data(), true);
  const int xi = x.id(), wi = w.id(), bi = b.id();
  return x.tape().record(std::move(y), {xi, wi, bi}, [xi, wi, bi, rows, in, out](Tape& t, int self) {
    const Tensor& gy = t.incoming(self);
    if (t.requires_grad(xi)) gemm(false, true, rows, in, out, gy.data(), t.value(wi).data(), t.grad(xi).data(), true);
    if (t.requires_grad(wi)) gemm(true, false, in, out, rows, t.value(xi).data(), gy.data(), t.grad(wi).data(), true);
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (int r = 0; r < rows; ++r) {
        const double* g = gy.data() + static_cast<std::size_t>(r) * out;
        for (int j = 0; j < out; ++j) gb[j] += g[j];
      }
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank("matmul", a, 2, "lhs");
  require_rank("matmul", b, 2, "rhs");
  const int M = a.value().dim(0), K = a.value().dim(1), N = b.value().dim(1);
  if (b.value().dim(0) != K) {
    shape_error("matmul", "rhs dimension 0 is " + std::to_string(b.value().dim(0)) + ", expected " + std::to_string(K));
  }
  Tensor y({M, N});
  gemm(false, false, M, N, K, a.value().data(), b.value().data(), y.data(), false);
  const int ai = a.id(), bi = b.id();
  return a.tape().record(std::move(y), {ai, bi}, [ai, bi, M, N, K](Tape& t, int self) {
    const Tensor& gy = t.incoming(self);
    if (t.requires_grad(ai)) gemm(false, true, M, K, N, gy.data(), t.value(bi).data(), t.grad(ai).data(), true);
    if (t.requires_grad(bi)) gemm(true, false, K, N, M, t.value(ai).data(), gy.data(), t.grad(bi).data(), true);
  });
}

Var bmm(const Var& a, const Var& b, bool ta, bool tb) {
  require_rank("bmm", a, 3, "lhs");
  require_rank("bmm", b, 3, "rhs");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const int B = av.dim(0);
  if (bv.dim(0) != B) shape_error("bmm", "batch dimension 0 mismatch (" + std::to_string(B) + " vs " + std::to_string(bv.dim(0)) + ")");
  const int M = ta ? av.dim(2) : av.dim(1);
  const int K = ta ? av.dim(1) : av.dim(2);
  const int Kb = tb ? bv.dim(2) : bv.dim(1);
  const int N = tb ? bv.dim(1) : bv.dim(2);
  if (K != Kb) shape_error("bmm", "contraction dimension mismatch (" + std::to_string(K) + " vs " + std::to_string(Kb) + ")");
  Tensor y({B, M, N});
  const std::size_t sa = static_cast<std::size_t>(M) * K, sb = static_cast<std::size_t>(K) * N,
                    sc = static_cast<std::size_t>(M) * N;
  for (int i = 0; i < B; ++i) gemm(ta, tb, M, N, K, av.data() + i * sa, bv.data() + i * sb, y.data() + i * sc, false);
  const int ai = a.id(), bi = b.id();
  return a.tape().record(std::move(y), {ai, bi}, [=](Tape& t, int self) {
    const Tensor& gy = t.incoming(self);
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad(ai);
      for (int i = 0; i < B; ++i) {
        if (!ta) {
          gemm(false, !tb, M, K, N, gy.data() + i * sc, bv.data() + i * sb, ga.data() + i * sa, true);
        } else {
          gemm(tb, true, K, M, N, bv.data() + i * sb, gy.data() + i * sc, ga.data() + i * sa, true);
        }
      }
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (int i = 0; i < B; ++i) {
        if (!tb) {
          gemm(!ta, false, K, N, M, av.data() + i * sa, gy.data() + i * sc, gb.data() + i * sb, true);
        } else {
          gemm(true, ta, N, K, M, gy.data() + i * sc, av.data() + i * sa, gb.data() + i * sb, true);
        }
      }
    }
  });
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const Shape& s0 = parts[0].shape();
  const int rank = static_cast<int>(s0.size());
  axis = normalize_axis("concat", axis, rank);
  Shape ys = s0;
  ys[axis] = 0;
  std::vector<int> lens;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (static_cast<int>(s.size()) != rank) shape_error("concat", "rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
    for (int d = 0; d < rank; ++d) {
      if (d != axis && s[d] != s0[d]) {
        shape_error("concat", "dimension " + std::to_string(d) + " mismatch (" + std::to_string(s0[d]) + " vs " +
                                  std::to_string(s[d]) + ")");
      }
    }
    lens.push_back(s[axis]);
    ys[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[d];
  for (int d = axis + 1; d < rank; ++d) inner *= s0[d];
  Tensor y(ys);
  const std::size_t ystride = static_cast<std::size_t>(ys[axis]) * inner;
  std::size_t off = 0;
  std::vector<int> ids;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    const std::size_t chunk = static_cast<std::size_t>(lens[k]) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(pv.data() + o * chunk, pv.data() + (o + 1) * chunk, y.data() + o * ystride + off);
    }
    off += chunk;
    ids.push_back(parts[k].id());
  }
  return parts[0].tape().record(std::move(y), ids, [ids, lens, outer, inner, ystride](Tape& t, int self) {
    const Tensor& gy = t.incoming(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t chunk = static_cast<std::size_t>(lens[k]) * inner;
      if (t.requires_grad(ids[k])) {
        Tensor& g = t.grad(ids[k]);
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = gy.data() + o * ystride + off;
          double* dst = g.data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
      off += chunk;
    }
  });
}

Var slice(const Var& x, int axis, int start, int length) {
  const Shape& xs = x.shape();
  const int rank = static_cast<int>(xs.size());
  axis = normalize_axis("slice", axis, rank);
  if (start < 0 || length <= 0 || start + length > xs[axis]) {
    shape_error("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") exceeds dimension " + std::to_string(axis) + " of size " + std::to_string(xs[axis]));
  }
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= xs[d];
  for (int d = axis + 1; d < rank; ++d) inner *= xs[d];
  Shape ys = xs;
  ys[axis] = length;
  Tensor y(ys);
  const std::size_t xstride = static_cast<std::size_t>(xs[axis]) * inner;
  const std::size_t chunk = static_cast<std::size_t>(length) * inner;
  const std::size_t off = static_cast<std::size_t>(start) * inner;
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy(xv.data() + o * xstride + off, xv.data() + o * xstride + off + chunk, y.data() + o * chunk);
  }
  const int xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi, outer, xstride, chunk, off](Tape& t, int self) {
    const Tensor& gy = t.incoming(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t o = 0; o < outer; ++o) {
      double* dst = gx.data() + o * xstride + off;
      const double* src = gy.data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  if (shape_numel(shape) != x.value().numel()) {
    shape_error("reshape", shape_str(x.shape()) + " cannot become " + shape_str(shape));
  }
  Tensor y = x.value().reshaped(std::move(shape));
  const int xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi](Tape& t, int self) {
    const Tensor& gy = t.incoming(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i];
  });
}

Var permute(const Var& x, const std::vector<int>& perm) {
  const Shape& xs = x.shape();
  const int rank = static_cast<int>(xs.size());
  if (static_cast<int>(perm.size()) != rank) shape_error("permute", "permutation length does not match rank");
  std::vector<int> seen(rank, 0);
  for (int p : perm) {
    if (p < 0 || p >= rank || seen[p]++) shape_error("permute", "invalid permutation");
  }
  std::vector<std::size_t> xstride(rank, 1);
  for (int d = rank - 2; d >= 0; --d) xstride[d] = xstride[d + 1] * xs[d + 1];
  Shape ys(rank);
  std::vector<std::size_t> src_stride(rank);
  for (int d = 0; d < rank; ++d) {
    ys[d] = xs[perm[d]];
    src_stride[d] = xstride[perm[d]];
  }
  // Offsets into x for each element of y, in y order.
  const std::size_t n = x.value().numel();
  std::vector<std::size_t> map(n);
  std::vector<int> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = src;
    for (int d = rank - 1; d >= 0; --d) {
      ++idx[d];
      src += src_stride[d];
      if (idx[d] < ys[d]) break;
      src -= src_stride[d] * ys[d];
      idx[d] = 0;
    }
  }
  Tensor y(ys);
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < n; ++i) y[i] = xv[map[i]];
  const int xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi, map = std::move(map)](Tape& t, int self) {
    const Tensor& gy = t.incoming(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < map.size(); ++i) gx[map[i]] += gy[i];
  });
}

Var sum(const Var& x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.values()) s += v;
  const int xi = x.id();
  return x.tape().record(Tensor::scalar(s), {xi}, [xi](Tape& t, int self) {
    const double g = t.incoming(self)[0];
    Tensor& gx = t.grad(xi);
    for (double& v : gx.values()) v += g;
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

Var conv2d(const Var& x, const Var& w, const Var& b, ConvGeometry g) {
  require_rank("conv2d", x, 4, "input");
  require_rank("conv2d", w, 4, "weight");
  require_rank("conv2d", b, 1, "bias");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const int N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Co = wv.dim(0), k = g.kernel;
  if (wv.dim(1) != Ci) {
    shape_error("conv2d", "input channel dimension 1 is " + std::to_string(Ci) + ", weight expects " + std::to_string(wv.dim(1)));
  }
  if (wv.dim(2) != k || wv.dim(3) != k) shape_error("conv2d", "weight kernel dims must be " + std::to_string(k));
  if (b.value().dim(0) != Co) shape_error("conv2d", "bias dimension 0 must be " + std::to_string(Co));
  const int Ho = (H + 2 * g.pad - k) / g.stride + 1;
  const int Wo = (W + 2 * g.pad - k) / g.stride + 1;
  if (H + 2 * g.pad < k || W + 2 * g.pad < k || Ho < 1 || Wo < 1) {
    shape_error("conv2d", "spatial dimensions " + std::to_string(H) + "x" + std::to_string(W) + " too small for kernel");
  }
  const int R = Ci * k * k, P = Ho * Wo;
  Tensor y({N, Co, Ho, Wo});
  std::vector<double> col(static_cast<std::size_t>(R) * P);
  const Tensor& bv = b.value();
  for (int n = 0; n < N; ++n) {
    im2col(xv.data() + static_cast<std::size_t>(n) * Ci * H * W, Ci, H, W, k, g.stride, g.pad, Ho, Wo, col.data());
    double* out = y.data() + static_cast<std::size_t>(n) * Co * P;
    for (int c = 0; c < Co; ++c) std::fill(out + c * P, out + (c + 1) * P, bv[c]);
    gemm(false, false, Co, P, R, wv.data(), col.data(), out, true);
  }
  const int xi = x.id(), wi = w.id(), bi = b.id();
  return x.tape().record(std::move(y), {xi, wi, bi}, [=](Tape& t, int self) {
    const Tensor& gy = t.incoming(self);
    const Tensor& xv = t.value(xi);
    const Tensor& wv = t.value(wi);
    std::vector<double> col(static_cast<std::size_t>(R) * P);
    for (int n = 0; n < N; ++n) {
      const double* gyn = gy.data() + static_cast<std::size_t>(n) * Co * P;
      if (t.requires_grad(wi)) {
        im2col(xv.data() + static_cast<std::size_t>(n) * Ci * H * W, Ci, H, W, k, g.stride, g.pad, Ho, Wo, col.data());
        gemm(false, true, Co, R, P, gyn, col.data(), t.grad(wi).data(), true);
      }
      if (t.requires_grad(xi)) {
        gemm(true, false, R, P, Co, wv.data(), gyn, col.data(), false);
        col2im(col.data(), Ci, H, W, k, g.stride, g.pad, Ho, Wo, t.grad(xi).data() + static_cast<std::size_t>(n) * Ci * H * W);
      }
      if (t.requires_grad(bi)) {
        Tensor& gb = t.grad(bi);
        for (int c = 0; c < Co; ++c) {
          double s = 0.0;
          for (int p = 0; p < P; ++p) s += gyn[c * P + p];
          gb[c] += s;
        }
      }
    }
  });
}

Var deconv2d(const Var& x, const Var& w, const Var& b, ConvGeometry g) {
  require_rank("deconv2d", x, 4, "input");
  require_rank("deconv2d", w, 4, "weight");
  require_rank("deconv2d", b, 1, "bias");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const int N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Co = wv.dim(1), k = g.kernel;
  if (wv.dim(0) != Ci) {
    shape_error("deconv2d", "input channel dimension 1 is " + std::to_string(Ci) + ", weight expects " + std::to_string(wv.dim(0)));
  }
  if (wv.dim(2) != k || wv.dim(3) != k) shape_error("deconv2d", "weight kernel dims must be " + std::to_string(k));
  if (b.value().dim(0) != Co) shape_error("deconv2d", "bias dimension 0 must be " + std::to_string(Co));
  const int Ho = (H - 1) * g.stride - 2 * g.pad + k;
  const int Wo = (W - 1) * g.stride - 2 * g.pad + k;
  if (Ho < 1 || Wo < 1) shape_error("deconv2d", "output would be empty");
  const int R = Co * k * k, P = H * W;
  Tensor y({N, Co, Ho, Wo});
  std::vector<double> col(static_cast<std::size_t>(R) * P);
  const Tensor& bv = b.value();
  for (int n = 0; n < N; ++n) {
    gemm(true, false, R, P, Ci, wv.data(), xv.data() + static_cast<std::size_t>(n) * Ci * P, col.data(), false);
    double* out = y.data() + static_cast<std::size_t>(n) * Co * Ho * Wo;
    for (int c = 0; c < Co; ++c) std::fill(out + c * Ho * Wo, out + (c + 1) * Ho * Wo, bv[c]);
    col2im(col.data(), Co, Ho, Wo, k, g.stride, g.pad, H, W, out);
  }
  const int xi = x.id(), wi = w.id(), bi = b.id();
  return x.tape().record(std::move(y), {xi, wi, bi}, [=](Tape& t, int self) {
    const Tensor& gy = t.incoming(self);
    const Tensor& xv = t.value(xi);
    const Tensor& wv = t.value(wi);
    std::vector<double> col(static_cast<std::size_t>(R) * P);
    for (int n = 0; n < N; ++n) {
      const double* gyn = gy.data() + static_cast<std::size_t>(n) * Co * Ho * Wo;
      im2col(gyn, Co, Ho, Wo, k, g.stride, g.pad, H, W, col.data());
      if (t.requires_grad(xi)) {
        gemm(false, false, Ci, P, R, wv.data(), col.data(), t.grad(xi).data() + static_cast<std::size_t>(n) * Ci * P, true);
      }
      if (t.requires_grad(wi)) {
        gemm(false, true, Ci, R, P, xv.data() + static_cast<std::size_t>(n) * Ci * P, col.data(), t.grad(wi).data(), true);
      }
      if (t.requires_grad(bi)) {
        Tensor& gb = t.grad(bi);
        const int HW = Ho * Wo;
        for (int c = 0; c < Co; ++c) {
          double s = 0.0;
          for (int p = 0; p < HW; ++p) s += gyn[c * HW + p];
          gb[c] += s;
        }
      }
    }
  });
}

BatchNormResult batch_norm2d_train(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_rank("batch_norm2d", x, 4, "input");
  const Tensor& xv = x.value();
  const int N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  if (gamma.value().numel() != static_cast<std::size_t>(C) || beta.value().numel() != static_cast<std::size_t>(C)) {
    shape_error("batch_norm2d", "scale/shift must have " + std::to_string(C) + " entries (input dimension 1)");
  }
  const int M = N * HW;
  if (M < 2) shape_error("batch_norm2d", "needs at least two values per channel");
  Tensor mu({C}), var({C}), var_unbiased({C});
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int n = 0; n < N; ++n) {
      const double* p = xv.data() + (static_cast<std::size_t>(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) s += p[i];
    }
    const double m = s / M;
    double ss = 0.0;
    for (int n = 0; n < N; ++n) {
      const double* p = xv.data() + (static_cast<std::size_t>(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) ss += (p[i] - m) * (p[i] - m);
    }
    mu[c] = m;
    var[c] = ss / M;
    var_unbiased[c] = ss / (M - 1);
  }
  Tensor xhat(xv.shape()), y(xv.shape());
  Tensor inv_std({C});
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (int c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) {
        xhat[base + i] = (xv[base + i] - mu[c]) * inv_std[c];
        y[base + i] = gv[c] * xhat[base + i] + bv[c];
      }
    }
  }
  const int xi = x.id(), gi = gamma.id(), bi = beta.id();
  Var out = x.tape().record(std::move(y), {xi, gi, bi},
                            [=, xhat = std::move(xhat), inv_std = inv_std](Tape& t, int self) {
    const Tensor& gy = t.incoming(self);
    const Tensor& gv = t.value(gi);
    std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < C; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) {
          sum_dy[c] += gy[base + i];
          sum_dy_xhat[c] += gy[base + i] * xhat[base + i];
        }
      }
    }
    if (t.requires_grad(gi)) {
      Tensor& gg = t.grad(gi);
      for (int c = 0; c < C; ++c) gg[c] += sum_dy_xhat[c];
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (int c = 0; c < C; ++c) gb[c] += sum_dy[c];
    }
    if (t.requires_grad(xi)) {
      Tensor& gx = t.grad(xi);
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
          const double k = gv[c] * inv_std[c] / M;
          for (int i = 0; i < HW; ++i) {
            gx[base + i] += k * (M * gy[base + i] - sum_dy[c] - xhat[base + i] * sum_dy_xhat[c]);
          }
        }
      }
    }
  });
  return BatchNormResult{out, std::move(mu), std::move(var_unbiased)};
}

Var batch_norm2d_infer(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
                       const Tensor& running_var, double eps) {
  require_rank("batch_norm2d", x, 4, "input");
  const Tensor& xv = x.value();
  const int N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  const auto c_entries = static_cast<std::size_t>(C);
  if (gamma.value().numel() != c_entries || beta.value().numel() != c_entries || running_mean.numel() != c_entries ||
      running_var.numel() != c_entries) {
    shape_error("batch_norm2d", "per-channel tensors must have " + std::to_string(C) + " entries (input dimension 1)");
  }
  Tensor inv_std({C});
  for (int c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor y(xv.shape());
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) y[base + i] = gv[c] * (xv[base + i] - running_mean[c]) * inv_std[c] + bv[c];
    }
  }
  const int xi = x.id(), gi = gamma.id(), bi = beta.id();
  return x.tape().record(std::move(y), {xi, gi, bi}, [=, mean = running_mean](Tape& t, int self) {
    const Tensor& gy = t.incoming(self);
    const Tensor& xv = t.value(xi);
    const Tensor& gv = t.value(gi);
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < C; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) {
          const double d = gy[base + i];
          if (t.requires_grad(xi)) t.grad(xi)[base + i] += d * gv[c] * inv_std[c];
          if (t.requires_grad(gi)) t.grad(gi)[c] += d * (xv[base + i] - mean[c]) * inv_std[c];
          if (t.requires_grad(bi)) t.grad(bi)[c] += d;
        }
      }
    }
  });
}

LstmOutput lstm_cell(const Var& x, const Var& h, const Var& c, const Var& w, const Var& b) {
  require_rank("lstm_cell", x, 2, "input");
  require_rank("lstm_cell", h, 2, "hidden");
  require_rank("lstm_cell", w, 2, "weight");
  require_same("lstm_cell", h, c);
  const int H = h.value().dim(1);
  if (x.value().dim(0) != h.value().dim(0)) shape_error("lstm_cell", "batch dimension 0 mismatch between input and state");
  if (w.value().dim(0) != x.value().dim(1) + H || w.value().dim(1) != 4 * H) {
    shape_error("lstm_cell", "weight must be [" + std::to_string(x.value().dim(1) + H) + ", " + std::to_string(4 * H) +
                                 "], got " + shape_str(w.shape()));
  }
  const Var xh[] = {x, h};
  Var gates = linear(concat(xh, 1), w, b);
  Var i = sigmoid(slice(gates, 1, 0, H));
  Var f = sigmoid(slice(gates, 1, H, H));
  Var g = tanh(slice(gates, 1, 2 * H, H));
  Var o = sigmoid(slice(gates, 1, 3 * H, H));
  Var c_next = add(mul(f, c), mul(i, g));
  Var h_next = mul(o, tanh(c_next));
  return LstmOutput{h_next, c_next};
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Square: return "square";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Clamp: return "clamp";
    case OpKind::LeakyRelu: return "leaky_relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Tanh: return "tanh";
    case OpKind::Softmax: return "softmax";
    case OpKind::Linear: return "linear";
    case OpKind::MatMul: return "matmul";
    case OpKind::BatchMatMul: return "bmm";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Reshape: return "reshape";
    case OpKind::Permute: return "permute";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Deconv2d: return "deconv2d";
    case OpKind::BatchNorm2dTrain: return "batch_norm2d_train";
    case OpKind::BatchNorm2dInfer: return "batch_norm2d_infer";
    case OpKind::LstmCell: return "lstm_cell";
  }
  return "unknown";
}

const std::vector<OpKind>& op_catalog() {
  static const std::vector<OpKind> all = {
      OpKind::Add,       OpKind::Sub,        OpKind::Mul,         OpKind::Scale,     OpKind::AddScalar,
      OpKind::Square,    OpKind::Exp,        OpKind::Log,         OpKind::Clamp,     OpKind::LeakyRelu,
      OpKind::Sigmoid,   OpKind::Tanh,       OpKind::Softmax,     OpKind::Linear,    OpKind::MatMul,
      OpKind::BatchMatMul, OpKind::Concat,   OpKind::Slice,       OpKind::Reshape,   OpKind::Permute,
      OpKind::Sum,       OpKind::Mean,       OpKind::Conv2d,      OpKind::Deconv2d,  OpKind::BatchNorm2dTrain,
      OpKind::BatchNorm2dInfer, OpKind::LstmCell};
  return all;
}

Var apply(OpKind kind, const OpAttrs& a, std::span<const Var> in) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw std::invalid_argument(std::string(op_name(kind)) + ": expected " + std::to_string(n) + " inputs, got " +
                                  std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::Add: need(2); return add(in[0], in[1]);
    case OpKind::Sub: need(2); return sub(in[0], in[1]);
    case OpKind::Mul: need(2); return mul(in[0], in[1]);
    case OpKind::Scale: need(1); return scale(in[0], a.scalar);
    case OpKind::AddScalar: need(1); return add_scalar(in[0], a.scalar);
    case OpKind::Square: need(1); return square(in[0]);
    case OpKind::Exp: need(1); return exp(in[0]);
    case OpKind::Log: need(1); return log(in[0]);
    case OpKind::Clamp: need(1); return clamp(in[0], a.lo, a.hi);
    case OpKind::LeakyRelu: need(1); return leaky_relu(in[0], a.scalar);
    case OpKind::Sigmoid: need(1); return sigmoid(in[0]);
    case OpKind::Tanh: need(1); return tanh(in[0]);
    case OpKind::Softmax: need(1); return softmax(in[0]);
    case OpKind::Linear: need(3); return linear(in[0], in[1], in[2]);
    case OpKind::MatMul: need(2); return matmul(in[0], in[1]);
    case OpKind::BatchMatMul: need(2); return bmm(in[0], in[1], a.trans_a, a.trans_b);
    case OpKind::Concat:
      if (in.empty()) need(1);
      return concat(in, a.axis);
    case OpKind::Slice: need(1); return slice(in[0], a.axis, a.start, a.length);
    case OpKind::Reshape: need(1); return reshape(in[0], a.shape);
    case OpKind::Permute: need(1); return permute(in[0], a.perm);
    case OpKind::Sum: need(1); return sum(in[0]);
    case OpKind::Mean: need(1); return mean(in[0]);
    case OpKind::Conv2d: need(3); return conv2d(in[0], in[1], in[2], a.conv);
    case OpKind::Deconv2d: need(3); return deconv2d(in[0], in[1], in[2], a.conv);
    case OpKind::BatchNorm2dTrain: need(3); return batch_norm2d_train(in[0], in[1], in[2], a.eps).out;
    case OpKind::BatchNorm2dInfer:
      need(3);
      return batch_norm2d_infer(in[0], in[1], in[2], a.running_mean, a.running_var, a.eps);
    case OpKind::LstmCell: {
      need(5);
      LstmOutput o = lstm_cell(in[0], in[1], in[2], in[3], in[4]);
      const Var hc[] = {o.h, o.c};
      return concat(hc, 1);
    }
  }
  throw std::invalid_argument("apply: unknown op kind");
}

Tensor forward(OpKind kind, const OpAttrs& attrs, std::span<const Tensor> inputs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].all_finite()) {
      throw std::invalid_argument(std::string(op_name(kind)) + ": input " + std::to_string(i) + " is not finite");
    }
    vars.push_back(tape.constant(inputs[i]));
  }
  return apply(kind, attrs, vars).value();
}

}  // namespace avf::diff
