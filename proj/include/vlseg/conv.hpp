#pragma once

// Convolution, pooling and sub-pixel rearrangement ops on [B, C, ...] tensors.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "vlseg/autodiff.hpp"
#include "vlseg/ops.hpp"
#include "vlseg/tensor.hpp"

namespace vlseg {

/// Depthwise 1-D cross-correlation, zero padded to keep the length.
/// x [B, C, N], kernel [C, k] with k odd, bias [C].
inline Var conv1d_depthwise(const Var& x, const Var& kernel, const Var& bias) {
  Tape& tape = detail::same_tape(x, kernel);
  detail::same_tape(x, bias);
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() != 3 || ks.size() != 2 || ks[0] != xs[1] || bias.shape() != Shape{xs[1]}) {
    throw DimensionError("conv1d_depthwise: x " + shape_str(xs) + ", kernel " + shape_str(ks) + ", bias " +
                         shape_str(bias.shape()));
  }
  const std::size_t k = ks[1];
  if (k % 2 == 0) throw ConfigError("conv1d_depthwise: kernel size must be odd, got " + std::to_string(k));
  const std::size_t B = xs[0], C = xs[1], N = xs[2];
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  const Tensor& bv = bias.value();
  Tensor out(xs);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* in = xv.data().data() + (b * C + c) * N;
      double* o = out.data().data() + (b * C + c) * N;
      for (std::size_t n = 0; n < N; ++n) {
        double s = bv[c];
        for (std::size_t j = 0; j < k; ++j) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(n + j) - half;
          if (src >= 0 && src < static_cast<std::ptrdiff_t>(N)) s += kv[c * k + j] * in[src];
        }
        o[n] = s;
      }
    }
  }
  const std::size_t xi = x.id(), ki = kernel.id(), bi = bias.id();
  return tape.record(std::move(out), {x, kernel, bias}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& kv = t.value(ki);
    const bool gx_on = t.wants_grad(xi), gk_on = t.wants_grad(ki), gb_on = t.wants_grad(bi);
    Tensor* gx = gx_on ? &t.grad(xi) : nullptr;
    Tensor* gk = gk_on ? &t.grad(ki) : nullptr;
    Tensor* gb = gb_on ? &t.grad(bi) : nullptr;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t base = (b * C + c) * N;
        for (std::size_t n = 0; n < N; ++n) {
          const double gv = g[base + n];
          if (gb) (*gb)[c] += gv;
          for (std::size_t j = 0; j < k; ++j) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(n + j) - half;
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(N)) continue;
            if (gx) (*gx)[base + src] += kv[c * k + j] * gv;
            if (gk) (*gk)[c * k + j] += xv[base + src] * gv;
          }
        }
      }
    }
  });
}

/// Output extent of a strided window: floor((n + 2 pad - k) / stride) + 1.
inline std::size_t conv_out_extent(std::size_t n, std::size_t k, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (n + 2 * pad < k) {
    throw ConfigError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                      std::to_string(n + 2 * pad));
  }
  return (n + 2 * pad - k) / stride + 1;
}

/// 2-D cross-correlation. x [B, Cin, H, W], kernel [Cout, Cin, k, k], bias [Cout].
inline Var conv2d(const Var& x, const Var& kernel, const std::optional<Var>& bias, std::size_t stride = 1,
                  std::size_t pad = 0) {
  Tape& tape = detail::same_tape(x, kernel);
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() != 4 || ks.size() != 4 || ks[1] != xs[1] || ks[2] != ks[3]) {
    throw DimensionError("conv2d: x " + shape_str(xs) + " incompatible with kernel " + shape_str(ks));
  }
  if (bias && bias->shape() != Shape{ks[0]}) {
    throw DimensionError("conv2d: bias " + shape_str(bias->shape()) + " for " + std::to_string(ks[0]) + " outputs");
  }
  const std::size_t B = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  const std::size_t Co = ks[0], K = ks[2];
  const std::size_t Ho = conv_out_extent(H, K, stride, pad), Wo = conv_out_extent(W, K, stride, pad);
  const std::ptrdiff_t P = static_cast<std::ptrdiff_t>(pad), S = static_cast<std::ptrdiff_t>(stride);

  // Valid output range [lo, hi) for a kernel tap at offset kk along an axis of length n.
  auto valid = [=](std::size_t kk, std::size_t n, std::size_t no, std::size_t& lo, std::size_t& hi) {
    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kk) - P;
    std::ptrdiff_t l = off >= 0 ? 0 : (-off + S - 1) / S;
    std::ptrdiff_t h = (static_cast<std::ptrdiff_t>(n) - 1 - off);
    h = h < 0 ? -1 : h / S;
    lo = static_cast<std::size_t>(l);
    hi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(h + 1, static_cast<std::ptrdiff_t>(no)));
    if (hi < lo) hi = lo;
  };

  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  Tensor out({B, Co, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t co = 0; co < Co; ++co) {
      double* o = out.data().data() + (b * Co + co) * Ho * Wo;
      if (bias) {
        const double bv = bias->value()[co];
        for (std::size_t i = 0; i < Ho * Wo; ++i) o[i] = bv;
      }
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* in = xv.data().data() + (b * Ci + ci) * H * W;
        for (std::size_t ky = 0; ky < K; ++ky) {
          std::size_t ylo, yhi;
          valid(ky, H, Ho, ylo, yhi);
          for (std::size_t kx = 0; kx < K; ++kx) {
            std::size_t xlo, xhi;
            valid(kx, W, Wo, xlo, xhi);
            if (xlo >= xhi) continue;
            const double wv = kv[((co * Ci + ci) * K + ky) * K + kx];
            for (std::size_t oy = ylo; oy < yhi; ++oy) {
              const double* row = in + (oy * stride + ky - pad) * W + (xlo * stride + kx - pad);
              double* orow = o + oy * Wo;
              for (std::size_t ox = xlo; ox < xhi; ++ox) orow[ox] += wv * row[(ox - xlo) * stride];
            }
          }
        }
      }
    }
  }
  const std::size_t xi = x.id(), ki = kernel.id();
  const std::optional<std::size_t> bi = bias ? std::optional<std::size_t>(bias->id()) : std::nullopt;
  std::vector<Var> parents{x, kernel};
  if (bias) parents.push_back(*bias);
  return tape.record(std::move(out), parents, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& kv = t.value(ki);
    if (bi && t.wants_grad(*bi)) {
      Tensor& gb = t.grad(*bi);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t co = 0; co < Co; ++co) {
          const double* gp = g.data().data() + (b * Co + co) * Ho * Wo;
          double s = 0.0;
          for (std::size_t i = 0; i < Ho * Wo; ++i) s += gp[i];
          gb[co] += s;
        }
      }
    }
    double* gx = t.wants_grad(xi) ? t.grad(xi).data().data() : nullptr;
    double* gk = t.wants_grad(ki) ? t.grad(ki).data().data() : nullptr;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t co = 0; co < Co; ++co) {
        const double* gp = g.data().data() + (b * Co + co) * Ho * Wo;
        for (std::size_t ci = 0; ci < Ci; ++ci) {
          const std::size_t xoff = (b * Ci + ci) * H * W;
          for (std::size_t ky = 0; ky < K; ++ky) {
            std::size_t ylo, yhi;
            valid(ky, H, Ho, ylo, yhi);
            for (std::size_t kx = 0; kx < K; ++kx) {
              std::size_t xlo, xhi;
              valid(kx, W, Wo, xlo, xhi);
              const std::size_t widx = ((co * Ci + ci) * K + ky) * K + kx;
              const double wv = kv[widx];
              double acc = 0.0;
              for (std::size_t oy = ylo; oy < yhi; ++oy) {
                if (xlo >= xhi) break;
                const std::size_t rowoff = xoff + (oy * stride + ky - pad) * W + (xlo * stride + kx - pad);
                const double* grow = gp + oy * Wo;
                if (gx) {
                  double* gxr = gx + rowoff;
                  for (std::size_t ox = xlo; ox < xhi; ++ox) gxr[(ox - xlo) * stride] += wv * grow[ox];
                }
                if (gk) {
                  const double* xr = xv.data().data() + rowoff;
                  for (std::size_t ox = xlo; ox < xhi; ++ox) acc += grow[ox] * xr[(ox - xlo) * stride];
                }
              }
              if (gk) gk[widx] += acc;
            }
          }
        }
      }
    }
  });
}

/// 2x2 transposed convolution with stride 2: [B, C, H, W] -> [B, Cout, 2H, 2W].
/// kernel [C, Cout, 2, 2], bias [Cout].
inline Var conv_transpose2d(const Var& x, const Var& kernel, const std::optional<Var>& bias) {
  Tape& tape = detail::same_tape(x, kernel);
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() != 4 || ks.size() != 4 || ks[0] != xs[1] || ks[2] != 2 || ks[3] != 2) {
    throw DimensionError("conv_transpose2d: x " + shape_str(xs) + " incompatible with kernel " + shape_str(ks) +
                         " (expects [C, Cout, 2, 2])");
  }
  if (bias && bias->shape() != Shape{ks[1]}) throw DimensionError("conv_transpose2d: bad bias shape");
  const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3], Co = ks[1];
  const std::size_t Ho = 2 * H, Wo = 2 * W;
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  Tensor out({B, Co, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t co = 0; co < Co; ++co) {
      double* o = out.data().data() + (b * Co + co) * Ho * Wo;
      if (bias) {
        const double bv = bias->value()[co];
        for (std::size_t i = 0; i < Ho * Wo; ++i) o[i] = bv;
      }
      for (std::size_t c = 0; c < C; ++c) {
        const double* in = xv.data().data() + (b * C + c) * H * W;
        const double* w = kv.data().data() + (c * Co + co) * 4;
        for (std::size_t i = 0; i < H; ++i) {
          for (std::size_t j = 0; j < W; ++j) {
            const double v = in[i * W + j];
            o[(2 * i) * Wo + 2 * j] += v * w[0];
            o[(2 * i) * Wo + 2 * j + 1] += v * w[1];
            o[(2 * i + 1) * Wo + 2 * j] += v * w[2];
            o[(2 * i + 1) * Wo + 2 * j + 1] += v * w[3];
          }
        }
      }
    }
  }
  const std::size_t xi = x.id(), ki = kernel.id();
  const std::optional<std::size_t> bi = bias ? std::optional<std::size_t>(bias->id()) : std::nullopt;
  std::vector<Var> parents{x, kernel};
  if (bias) parents.push_back(*bias);
  return tape.record(std::move(out), parents, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& kv = t.value(ki);
    double* gx = t.wants_grad(xi) ? t.grad(xi).data().data() : nullptr;
    double* gk = t.wants_grad(ki) ? t.grad(ki).data().data() : nullptr;
    double* gb = (bi && t.wants_grad(*bi)) ? t.grad(*bi).data().data() : nullptr;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t co = 0; co < Co; ++co) {
        const double* gp = g.data().data() + (b * Co + co) * Ho * Wo;
        if (gb) {
          for (std::size_t i = 0; i < Ho * Wo; ++i) gb[co] += gp[i];
        }
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t xoff = (b * C + c) * H * W;
          const std::size_t woff = (c * Co + co) * 4;
          for (std::size_t i = 0; i < H; ++i) {
            for (std::size_t j = 0; j < W; ++j) {
              const double g00 = gp[(2 * i) * Wo + 2 * j], g01 = gp[(2 * i) * Wo + 2 * j + 1];
              const double g10 = gp[(2 * i + 1) * Wo + 2 * j], g11 = gp[(2 * i + 1) * Wo + 2 * j + 1];
              if (gx) {
                gx[xoff + i * W + j] +=
                    g00 * kv[woff] + g01 * kv[woff + 1] + g10 * kv[woff + 2] + g11 * kv[woff + 3];
              }
              if (gk) {
                const double v = xv[xoff + i * W + j];
                gk[woff] += v * g00;
                gk[woff + 1] += v * g01;
                gk[woff + 2] += v * g10;
                gk[woff + 3] += v * g11;
              }
            }
          }
        }
      }
    }
  });
}

namespace detail {

inline Var gather(const Var& x, Shape out_shape, std::vector<std::size_t> map) {
  const Tensor& xv = x.value();
  Tensor out(std::move(out_shape));
  for (std::size_t o = 0; o < map.size(); ++o) out[o] = xv[map[o]];
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {x}, [xi, map = std::move(map)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t o = 0; o < map.size(); ++o) gx[map[o]] += g[o];
  });
}

}  // namespace detail

/// [B, C r^2, H, W] -> [B, C, rH, rW]; input channel c*r^2 + i*r + j lands at
/// sub-pixel (i, j) of output channel c.
inline Var pixel_shuffle(const Var& x, std::size_t r) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw DimensionError("pixel_shuffle expects [B, C, H, W], got " + shape_str(s));
  if (r == 0 || s[1] % (r * r) != 0) {
    throw ConfigError("pixel_shuffle: channels " + std::to_string(s[1]) + " not divisible by r^2 = " +
                      std::to_string(r * r));
  }
  const std::size_t B = s[0], C = s[1] / (r * r), H = s[2], W = s[3];
  std::vector<std::size_t> map(x.value().numel());
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H * r; ++y)
        for (std::size_t xx = 0; xx < W * r; ++xx) {
          const std::size_t ch = c * r * r + (y % r) * r + (xx % r);
          map[o++] = ((b * C * r * r + ch) * H + y / r) * W + xx / r;
        }
  return detail::gather(x, {B, C, H * r, W * r}, std::move(map));
}

/// Inverse of pixel_shuffle: [B, C, rH, rW] -> [B, C r^2, H, W].
inline Var pixel_unshuffle(const Var& x, std::size_t r) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw DimensionError("pixel_unshuffle expects [B, C, H, W], got " + shape_str(s));
  if (r == 0 || s[2] % r != 0 || s[3] % r != 0) {
    throw ConfigError("pixel_unshuffle: spatial extents not divisible by " + std::to_string(r));
  }
  const std::size_t B = s[0], C = s[1], H = s[2] / r, W = s[3] / r;
  std::vector<std::size_t> map(x.value().numel());
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t ch = 0; ch < C * r * r; ++ch)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          const std::size_t c = ch / (r * r), i = (ch % (r * r)) / r, j = ch % r;
          map[o++] = ((b * C + c) * H * r + y * r + i) * W * r + xx * r + j;
        }
  return detail::gather(x, {B, C * r * r, H, W}, std::move(map));
}

/// Shape-preserving o x o mean filter with zero padding (o - 1) / 2; the
/// divisor is always o^2, padded cells included.
inline Var avg_pool2d_padded(const Var& x, std::size_t o) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw DimensionError("avg_pool2d expects [B, C, H, W], got " + shape_str(s));
  if (o % 2 == 0) throw ConfigError("avg_pool2d: kernel must be odd, got " + std::to_string(o));
  const std::size_t planes = s[0] * s[1], H = s[2], W = s[3];
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(o / 2);
  const double inv = 1.0 / static_cast<double>(o * o);
  auto sweep = [=](const double* in, double* out) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t xx = 0; xx < W; ++xx) {
        double acc = 0.0;
        for (std::ptrdiff_t dy = -half; dy <= half; ++dy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y) + dy;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::ptrdiff_t dx = -half; dx <= half; ++dx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xx) + dx;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            acc += in[iy * static_cast<std::ptrdiff_t>(W) + ix];
          }
        }
        out[y * W + xx] += acc * inv;
      }
    }
  };
  const Tensor& xv = x.value();
  Tensor out(s);
  for (std::size_t p = 0; p < planes; ++p) sweep(xv.data().data() + p * H * W, out.data().data() + p * H * W);
  const std::size_t xi = x.id();
  // The filter is symmetric, so its adjoint is the same sweep.
  return x.tape().record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t p = 0; p < planes; ++p) sweep(g.data().data() + p * H * W, gx.data().data() + p * H * W);
  });
}

/// Batch statistics for one channel-normalized forward pass.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
};

/// Per-channel normalization of [B, C, H, W]. In training mode batch
/// statistics are used and the running estimates updated; otherwise the
/// running estimates are used.
inline Var batch_norm2d(const Var& x, const Var& gain, const Var& bias, BatchNormState& state, bool training) {
  Tape& tape = detail::same_tape(x, gain);
  const Shape& s = x.shape();
  if (s.size() != 4 || gain.shape() != Shape{s[1]} || bias.shape() != Shape{s[1]}) {
    throw DimensionError("batch_norm2d: x " + shape_str(s) + " with gain " + shape_str(gain.shape()));
  }
  const std::size_t B = s[0], C = s[1], HW = s[2] * s[3];
  const double n = static_cast<double>(B * HW);
  if (state.running_mean.empty()) {
    state.running_mean = Tensor({C}, 0.0);
    state.running_var = Tensor({C}, 1.0);
  }
  const Tensor& xv = x.value();
  std::vector<double> mu(C), rstd(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (training) {
      double m = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) m += xv[(b * C + c) * HW + i];
      m /= n;
      double v = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) v += (xv[(b * C + c) * HW + i] - m) * (xv[(b * C + c) * HW + i] - m);
      v /= n;
      mu[c] = m;
      rstd[c] = 1.0 / std::sqrt(v + kLayerNormEps);
      state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * m;
      state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * v;
    } else {
      mu[c] = state.running_mean[c];
      rstd[c] = 1.0 / std::sqrt(state.running_var[c] + kLayerNormEps);
    }
  }
  Tensor xhat(s), out(s);
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (b * C + c) * HW + i;
        xhat[idx] = (xv[idx] - mu[c]) * rstd[c];
        out[idx] = xhat[idx] * gv[c] + bv[c];
      }
  const std::size_t xi = x.id(), gi = gain.id(), bi = bias.id();
  return tape.record(std::move(out), {x, gain, bias},
                     [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, std::size_t self) {
                       const Tensor& g = t.grad(self);
                       const Tensor& gv = t.value(gi);
                       std::vector<double> s1(C, 0.0), s2(C, 0.0);
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t c = 0; c < C; ++c)
                           for (std::size_t i = 0; i < HW; ++i) {
                             const std::size_t idx = (b * C + c) * HW + i;
                             s1[c] += g[idx];
                             s2[c] += g[idx] * xhat[idx];
                           }
                       if (t.wants_grad(gi)) {
                         Tensor& gg = t.grad(gi);
                         for (std::size_t c = 0; c < C; ++c) gg[c] += s2[c];
                       }
                       if (t.wants_grad(bi)) {
                         Tensor& gb = t.grad(bi);
                         for (std::size_t c = 0; c < C; ++c) gb[c] += s1[c];
                       }
                       if (!t.wants_grad(xi)) return;
                       Tensor& gx = t.grad(xi);
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t c = 0; c < C; ++c)
                           for (std::size_t i = 0; i < HW; ++i) {
                             const std::size_t idx = (b * C + c) * HW + i;
                             if (training) {
                               gx[idx] += gv[c] * rstd[c] * (g[idx] - s1[c] / n - xhat[idx] * s2[c] / n);
                             } else {
                               gx[idx] += gv[c] * rstd[c] * g[idx];
                             }
                           }
                     });
}

}  // namespace vlseg
