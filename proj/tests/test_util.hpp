#pragma once

// Shared helpers for the test suites: random inputs, independent naive
// oracles, and gradient-check harnesses for single ops.

#include <cmath>
#include <complex>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "vlseg/autodiff.hpp"
#include "vlseg/gradcheck.hpp"
#include "vlseg/opchecks.hpp"
#include "vlseg/ops.hpp"
#include "vlseg/random.hpp"
#include "vlseg/tensor.hpp"

namespace vlseg::testing {

using vlseg::check_op;
using vlseg::OpFn;

inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  Tensor c({m, p});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      double s = 0.0;
      for (std::size_t q = 0; q < k; ++q) s += a.at(i, q) * b.at(q, j);
      c.at(i, j) = s;
    }
  return c;
}

inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, std::size_t stride,
                           std::size_t pad) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3), Co = w.dim(0), K = w.dim(2);
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  Tensor out({B, Co, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double s = bias ? (*bias)[co] : 0.0;
          for (std::size_t ci = 0; ci < Ci; ++ci)
            for (std::size_t ky = 0; ky < K; ++ky)
              for (std::size_t kx = 0; kx < K; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                s += x.at(b, ci, iy, ix) * w.at(co, ci, ky, kx);
              }
          out.at(b, co, oy, ox) = s;
        }
  return out;
}

inline Tensor naive_avg_pool(const Tensor& x, std::size_t o) {
  const long half = static_cast<long>(o / 2);
  const long H = static_cast<long>(x.dim(2)), W = static_cast<long>(x.dim(3));
  Tensor out(x.shape());
  for (std::size_t b = 0; b < x.dim(0); ++b)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (long y = 0; y < H; ++y)
        for (long xx = 0; xx < W; ++xx) {
          double s = 0.0;
          for (long dy = -half; dy <= half; ++dy)
            for (long dx = -half; dx <= half; ++dx) {
              if (y + dy < 0 || y + dy >= H || xx + dx < 0 || xx + dx >= W) continue;
              s += x.at(b, c, y + dy, xx + dx);
            }
          out.at(b, c, y, xx) = s / static_cast<double>(o * o);
        }
  return out;
}

/// Direct O(H^2 W^2) DFT magnitude of each plane.
inline Tensor naive_dft2_magnitude(const Tensor& x) {
  const std::size_t H = x.dim(2), W = x.dim(3);
  Tensor out(x.shape());
  for (std::size_t b = 0; b < x.dim(0); ++b)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t u = 0; u < H; ++u)
        for (std::size_t v = 0; v < W; ++v) {
          std::complex<double> acc(0.0, 0.0);
          for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w) {
              const double ang = -2.0 * std::numbers::pi *
                                 (static_cast<double>(u * h) / static_cast<double>(H) +
                                  static_cast<double>(v * w) / static_cast<double>(W));
              acc += x.at(b, c, h, w) * std::complex<double>(std::cos(ang), std::sin(ang));
            }
          out.at(b, c, u, v) = std::abs(acc);
        }
  return out;
}

/// Evaluate a function of Vars on constants and return the value.
inline Tensor eval(const std::function<Var(Tape&)>& f) {
  Tape tape;
  return f(tape).value();
}

}  // namespace vlseg::testing
