#pragma once

// Differentiable tensor primitives: elementwise math, shape manipulation,
// reductions, matmul, softmax, layer norm and activations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "vlseg/autodiff.hpp"
#include "vlseg/errors.hpp"
#include "vlseg/tensor.hpp"

namespace vlseg {

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands live on different tapes");
  return a.tape();
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  a.value().require_same_shape(b.value(), op);
}

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

/// Applies y = f(x) elementwise; dy/dx = df(x, y).
template <typename F, typename DF>
Var unary(const Var& x, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {x}, [xi, df](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& yv = t.value(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (identical shapes).

inline Var add(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  out += b.value();
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.wants_grad(ai)) t.grad(ai) += g;
    if (t.wants_grad(bi)) t.grad(bi) += g;
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "sub");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] - bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.wants_grad(ai)) t.grad(ai) += g;
    if (t.wants_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    if (t.wants_grad(ai)) {
      Tensor& ga = t.grad(ai);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.wants_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var div(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "div");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] / bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& bv = t.value(bi);
    const Tensor& y = t.value(self);
    if (t.wants_grad(ai)) {
      Tensor& ga = t.grad(ai);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / bv[i];
    }
    if (t.wants_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i] * y[i] / bv[i];
    }
  });
}

inline Var scale(const Var& x, double s) {
  return detail::unary(x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Var add_scalar(const Var& x, double s) {
  return detail::unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Var neg(const Var& x) { return scale(x, -1.0); }

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator*(double s, const Var& x) { return scale(x, s); }
inline Var operator*(const Var& x, double s) { return scale(x, s); }
inline Var operator+(const Var& x, double s) { return add_scalar(x, s); }
inline Var operator-(const Var& x) { return neg(x); }

// ---------------------------------------------------------------------------
// Unary math.

inline Var exp(const Var& x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

/// log(x + eps).
inline Var log(const Var& x, double eps = 0.0) {
  return detail::unary(
      x, [eps](double v) { return std::log(v + eps); }, [eps](double v, double) { return 1.0 / (v + eps); });
}

inline Var square(const Var& x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ---------------------------------------------------------------------------
// Activations.

enum class Activation { gelu, leaky_relu, tanh, softplus, sigmoid };

inline constexpr double kLeakySlope = 0.01;

inline double softplus_value(double v) {
  // log(1 + e^v) evaluated without overflow; linear above the threshold.
  if (v > 30.0) return v;
  if (v < -30.0) return std::exp(v);
  return std::log1p(std::exp(v));
}

inline double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline double gelu_value(double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); }

inline double gelu_derivative(double v) {
  const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * v * v) * 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return cdf + v * pdf;
}

inline Var gelu(const Var& x) {
  return detail::unary(x, gelu_value, [](double v, double) { return gelu_derivative(v); });
}

inline Var leaky_relu(const Var& x) {
  return detail::unary(
      x, [](double v) { return v >= 0.0 ? v : kLeakySlope * v; },
      [](double v, double) { return v >= 0.0 ? 1.0 : kLeakySlope; });
}

inline Var tanh(const Var& x) {
  return detail::unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var softplus(const Var& x) {
  return detail::unary(x, softplus_value, [](double v, double) { return sigmoid_value(v); });
}

inline Var sigmoid(const Var& x) {
  return detail::unary(x, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Var activation(const Var& x, Activation kind) {
  switch (kind) {
    case Activation::gelu: return gelu(x);
    case Activation::leaky_relu: return leaky_relu(x);
    case Activation::tanh: return tanh(x);
    case Activation::softplus: return softplus(x);
    case Activation::sigmoid: return sigmoid(x);
  }
  throw ConfigError("unknown activation");
}

// ---------------------------------------------------------------------------
// Shape manipulation.

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {x}, [xi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

namespace detail {

/// For each output flat index, the flat index it reads from in the input.
inline std::vector<std::size_t> permutation_map(const Shape& in, const std::vector<std::size_t>& perm,
                                                Shape& out_shape) {
  const std::size_t r = in.size();
  if (perm.size() != r) throw DimensionError("permute: permutation rank mismatch for " + shape_str(in));
  std::vector<bool> seen(r, false);
  out_shape.assign(r, 0);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || seen[perm[i]]) throw DimensionError("permute: invalid permutation");
    seen[perm[i]] = true;
    out_shape[i] = in[perm[i]];
  }
  const auto in_strides = strides_of(in);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_strides[perm[i]];
  const std::size_t n = shape_numel(in);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    map[o] = src;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      src += src_stride[d];
      if (idx[d] < out_shape[d]) break;
      src -= src_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace detail

/// Output axis i is input axis perm[i].
inline Var permute(const Var& x, const std::vector<std::size_t>& perm) {
  Shape out_shape;
  auto map = detail::permutation_map(x.shape(), perm, out_shape);
  const Tensor& xv = x.value();
  Tensor out(out_shape);
  for (std::size_t o = 0; o < map.size(); ++o) out[o] = xv[map[o]];
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {x}, [xi, map = std::move(map)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t o = 0; o < map.size(); ++o) gx[map[o]] += g[o];
  });
}

/// Swap the last two axes.
inline Var transpose_last(const Var& x) {
  const std::size_t r = x.shape().size();
  if (r < 2) throw DimensionError("transpose_last needs rank >= 2");
  std::vector<std::size_t> perm(r);
  for (std::size_t i = 0; i < r; ++i) perm[i] = i;
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(x, perm);
}

/// Expand size-1 axes (and missing leading axes) to `shape`; backward sums.
inline Var broadcast_to(const Var& x, const Shape& shape) {
  const Shape& in = x.shape();
  if (in.size() > shape.size()) {
    throw DimensionError("broadcast_to: cannot broadcast " + shape_str(in) + " to " + shape_str(shape));
  }
  const std::size_t lead = shape.size() - in.size();
  Shape padded(lead, 1);
  padded.insert(padded.end(), in.begin(), in.end());
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (padded[i] != shape[i] && padded[i] != 1) {
      throw DimensionError("broadcast_to: cannot broadcast " + shape_str(in) + " to " + shape_str(shape));
    }
  }
  const auto in_strides = detail::strides_of(padded);
  const std::size_t n = shape_numel(shape);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) {
      if (padded[d] != 1) src += idx[d] * in_strides[d];
    }
    map[o] = src;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  const Tensor& xv = x.value();
  Tensor out(shape);
  for (std::size_t o = 0; o < n; ++o) out[o] = xv[map[o]];
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {x}, [xi, map = std::move(map)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t o = 0; o < map.size(); ++o) gx[map[o]] += g[o];
  });
}

/// Concatenate along `axis`; all other extents must agree.
inline Var concat(const std::vector<Var>& xs, std::size_t axis) {
  if (xs.empty()) throw DimensionError("concat of zero tensors");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) throw DimensionError("concat axis out of range");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const Var& v : xs) {
    detail::same_tape(xs[0], v);
    const Shape& s = v.shape();
    if (s.size() != s0.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != s0[d]) {
        throw DimensionError("concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
      }
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  Tensor out(out_shape);
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<std::size_t> ids, offsets, widths;
  std::size_t off = 0;
  for (const Var& v : xs) {
    const std::size_t w = v.shape()[axis] * inner;
    const Tensor& vv = v.value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(vv.data().begin() + o * w, w, out.data().begin() + o * out_row + off);
    }
    ids.push_back(v.id());
    offsets.push_back(off);
    widths.push_back(w);
    off += w;
  }
  return xs[0].tape().record(
      std::move(out), xs, [ids, offsets, widths, outer, out_row](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.wants_grad(ids[k])) continue;
          Tensor& gx = t.grad(ids[k]);
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t j = 0; j < widths[k]; ++j) gx[o * widths[k] + j] += g[o * out_row + offsets[k] + j];
          }
        }
      });
}

/// Elements [start, start+len) along `axis`.
inline Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape& s = x.shape();
  if (axis >= s.size() || len == 0 || start + len > s[axis]) {
    throw DimensionError("slice out of range on " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  Shape out_shape = s;
  out_shape[axis] = len;
  const std::size_t in_row = s[axis] * inner, w = len * inner, off = start * inner;
  const Tensor& xv = x.value();
  Tensor out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.data().begin() + o * in_row + off, w, out.data().begin() + o * w);
  }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {x}, [xi, outer, in_row, w, off](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < w; ++j) gx[o * in_row + off + j] += g[o * w + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions.

// Reductions accumulate in extended precision so the scalar losses built on
// them stay close to correctly rounded.
inline Var sum(const Var& x) {
  long double acc = 0.0L;
  for (double v : x.value().data()) acc += v;
  const double s = static_cast<double>(acc);
  const std::size_t xi = x.id();
  return x.tape().record(Tensor::scalar(s), {x}, [xi](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    Tensor& gx = t.grad(xi);
    for (double& v : gx.data()) v += g;
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

/// Sum over every axis but the first: [B, ...] -> [B].
inline Var sum_per_sample(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t b = xv.dim(0);
  const std::size_t per = xv.numel() / b;
  Tensor out({b});
  for (std::size_t i = 0; i < b; ++i) {
    long double s = 0.0L;
    for (std::size_t j = 0; j < per; ++j) s += xv[i * per + j];
    out[i] = static_cast<double>(s);
  }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {x}, [xi, b, per](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < per; ++j) gx[i * per + j] += g[i];
    }
  });
}

/// Mean along one axis, keeping it with extent 1.
inline Var mean_axis(const Var& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("mean_axis: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t n = s[axis];
  Shape out_shape = s;
  out_shape[axis] = 1;
  const Tensor& xv = x.value();
  Tensor out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * n + k) * inner + i];
    }
  }
  out *= 1.0 / static_cast<double>(n);
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {x}, [xi, outer, inner, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t i = 0; i < inner; ++i) gx[(o * n + k) * inner + i] += g[o * inner + i] * inv;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix product.

namespace detail {

// c[M,P] += a[M,K] * b[K,P]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * p;
    for (std::size_t q = 0; q < k; ++q) {
      const double av = a[i * k + q];
      if (av == 0.0) continue;
      const double* brow = b + q * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[M,K] += g[M,P] * b[K,P]^T
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t q = 0; q < k; ++q) {
      double s = 0.0;
      for (std::size_t j = 0; j < p; ++j) s += g[i * p + j] * b[q * p + j];
      c[i * k + q] += s;
    }
  }
}

// c[K,P] += a[M,K]^T * g[M,P]
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t q = 0; q < k; ++q) {
      const double av = a[i * k + q];
      if (av == 0.0) continue;
      double* crow = c + q * p;
      const double* grow = g + i * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * grow[j];
    }
  }
}

}  // namespace detail

/// [.., M, K] x [.., K, P] -> [.., M, P].
///
/// Batch prefixes must be equal, or one operand must be a plain matrix that is
/// shared across the other's batch.
inline Var matmul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto fail = [&]() {
    return DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) throw fail();
  const std::size_t m = sa[sa.size() - 2], k = sa.back(), p = sb.back();
  if (sb[sb.size() - 2] != k) throw fail();
  const Shape pa(sa.begin(), sa.end() - 2), pb(sb.begin(), sb.end() - 2);
  Shape prefix;
  bool a_batched = !pa.empty(), b_batched = !pb.empty();
  if (a_batched && b_batched) {
    if (pa != pb) throw fail();
    prefix = pa;
  } else {
    prefix = a_batched ? pa : pb;
  }
  const std::size_t batch = shape_numel(prefix);
  Shape out_shape = prefix;
  out_shape.push_back(m);
  out_shape.push_back(p);
  Tensor out(out_shape);
  const double* ad = a.value().data().data();
  const double* bd = b.value().data().data();
  double* od = out.data().data();
  for (std::size_t n = 0; n < batch; ++n) {
    detail::gemm_nn(ad + (a_batched ? n * m * k : 0), bd + (b_batched ? n * k * p : 0), od + n * m * p, m, k, p);
  }
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {a, b},
                     [ai, bi, batch, m, k, p, a_batched, b_batched](Tape& t, std::size_t self) {
                       const double* g = t.grad(self).data().data();
                       const double* ad = t.value(ai).data().data();
                       const double* bd = t.value(bi).data().data();
                       if (t.wants_grad(ai)) {
                         double* ga = t.grad(ai).data().data();
                         for (std::size_t n = 0; n < batch; ++n) {
                           detail::gemm_nt(g + n * m * p, bd + (b_batched ? n * k * p : 0),
                                           ga + (a_batched ? n * m * k : 0), m, k, p);
                         }
                       }
                       if (t.wants_grad(bi)) {
                         double* gb = t.grad(bi).data().data();
                         for (std::size_t n = 0; n < batch; ++n) {
                           detail::gemm_tn(ad + (a_batched ? n * m * k : 0), g + n * m * p,
                                           gb + (b_batched ? n * k * p : 0), m, k, p);
                         }
                       }
                     });
}

/// x[.., in] * w[in, out] + bias[out].
inline Var linear(const Var& x, const Var& w, const Var& bias) {
  Var y = matmul(x, w);
  return add(y, broadcast_to(bias, y.shape()));
}

// ---------------------------------------------------------------------------
// Softmax and layer norm.

inline Var softmax_lastdim(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.shape().back();
  const std::size_t rows = xv.numel() / n;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * n;
    double* o = out.data().data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= s;
  }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {x}, [xi, n, rows](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      double d = 0.0;
      for (std::size_t j = 0; j < n; ++j) d += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - d);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// When set, layer_norm lowers it to the smallest row variance it sees over
/// rows wider than one element. Used to screen evaluation points.
inline thread_local double* layer_norm_min_variance = nullptr;

/// Normalize each last-axis slice to zero mean and unit variance, then apply
/// gain and bias (both shaped [last extent]).
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias) {
  Tape& tape = detail::same_tape(x, gain);
  detail::same_tape(x, bias);
  const Tensor& xv = x.value();
  const std::size_t n = xv.shape().back();
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n}) {
    throw DimensionError("layer_norm: gain/bias must be [" + std::to_string(n) + "], got " +
                         shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  }
  const std::size_t rows = xv.numel() / n;
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    if (layer_norm_min_variance != nullptr && n > 1) *layer_norm_min_variance = std::min(*layer_norm_min_variance, var);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (in[j] - mu) * rstd[r];
      out[r * n + j] = xhat[r * n + j] * gv[j] + bv[j];
    }
  }
  const std::size_t xi = x.id(), gi = gain.id(), bi = bias.id();
  return tape.record(std::move(out), {x, gain, bias},
                     [xi, gi, bi, n, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, std::size_t self) {
                       const Tensor& g = t.grad(self);
                       const Tensor& gv = t.value(gi);
                       if (t.wants_grad(gi) || t.wants_grad(bi)) {
                         Tensor& gg = t.grad(gi);
                         Tensor& gb = t.grad(bi);
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < n; ++j) {
                             gg[j] += g[r * n + j] * xhat[r * n + j];
                             gb[j] += g[r * n + j];
                           }
                         }
                       }
                       if (!t.wants_grad(xi)) return;
                       Tensor& gx = t.grad(xi);
                       const double inv_n = 1.0 / static_cast<double>(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double s1 = 0.0, s2 = 0.0;
                         for (std::size_t j = 0; j < n; ++j) {
                           const double dh = g[r * n + j] * gv[j];
                           s1 += dh;
                           s2 += dh * xhat[r * n + j];
                         }
                         for (std::size_t j = 0; j < n; ++j) {
                           const double dh = g[r * n + j] * gv[j];
                           gx[r * n + j] += rstd[r] * (dh - inv_n * s1 - xhat[r * n + j] * inv_n * s2);
                         }
                       }
                     });
}

/// Layer norm across the channel axis of a [B, C, ...] tensor.
inline Var channel_norm(const Var& x, const Var& gain, const Var& bias) {
  const std::size_t r = x.shape().size();
  std::vector<std::size_t> to_last, back;
  to_last.push_back(0);
  for (std::size_t d = 2; d < r; ++d) to_last.push_back(d);
  to_last.push_back(1);
  back.assign(r, 0);
  for (std::size_t i = 0; i < r; ++i) back[to_last[i]] = i;
  return permute(layer_norm(permute(x, to_last), gain, bias), back);
}

/// Softmax across the channel axis of a [B, C, ...] tensor.
inline Var softmax_channels(const Var& x) {
  const std::size_t r = x.shape().size();
  std::vector<std::size_t> to_last, back;
  to_last.push_back(0);
  for (std::size_t d = 2; d < r; ++d) to_last.push_back(d);
  to_last.push_back(1);
  back.assign(r, 0);
  for (std::size_t i = 0; i < r; ++i) back[to_last[i]] = i;
  return permute(softmax_lastdim(permute(x, to_last)), back);
}

}  // namespace vlseg
