#pragma once

// Radix-2 FFT and the differentiable 2-D DFT magnitude.

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "vlseg/autodiff.hpp"
#include "vlseg/errors.hpp"
#include "vlseg/tensor.hpp"

namespace vlseg {

using Complex = std::complex<double>;

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

/// In-place iterative Cooley-Tukey. sign = -1 is the forward transform,
/// +1 the unnormalized inverse. `stride` walks a strided view.
inline void fft_inplace(Complex* data, std::size_t n, std::size_t stride, int sign) {
  if (!is_power_of_two(n)) throw ConfigError("fft: length " + std::to_string(n) + " is not a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(data[i * stride], data[j * stride]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    for (std::size_t k = 0; k < half; ++k) {
      const double ang = sign * 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(len);
      const Complex w(std::cos(ang), std::sin(ang));
      for (std::size_t i = 0; i < n; i += len) {
        Complex& a = data[(i + k) * stride];
        Complex& b = data[(i + k + half) * stride];
        const Complex t = w * b;
        b = a - t;
        a += t;
      }
    }
  }
}

/// Unnormalized 2-D transform of one H x W plane (row-major), in place.
inline void fft2_inplace(std::span<Complex> plane, std::size_t h, std::size_t w, int sign = -1) {
  for (std::size_t r = 0; r < h; ++r) fft_inplace(plane.data() + r * w, w, 1, sign);
  for (std::size_t c = 0; c < w; ++c) fft_inplace(plane.data() + c, h, w, sign);
}

inline void require_fft_extents(const Shape& s) {
  if (s.size() != 4) throw DimensionError("dft2 expects [B, C, H, W], got " + shape_str(s));
  if (!is_power_of_two(s[2]) || !is_power_of_two(s[3])) {
    throw ConfigError("dft2: spatial extents " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                      " must be powers of two; zero-pad the input first");
  }
}

/// Per-plane forward spectrum of a real [B, C, H, W] tensor.
inline std::vector<Complex> dft2_spectrum(const Tensor& x) {
  require_fft_extents(x.shape());
  const std::size_t h = x.dim(2), w = x.dim(3), planes = x.numel() / (h * w);
  std::vector<Complex> spec(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) spec[i] = Complex(x[i], 0.0);
  for (std::size_t p = 0; p < planes; ++p) fft2_inplace(std::span(spec).subspan(p * h * w, h * w), h, w, -1);
  return spec;
}

/// Real and imaginary parts of the forward spectrum, each [B, C, H, W].
inline std::pair<Tensor, Tensor> dft2_parts(const Tensor& x) {
  auto spec = dft2_spectrum(x);
  Tensor re(x.shape()), im(x.shape());
  for (std::size_t i = 0; i < spec.size(); ++i) {
    re[i] = spec[i].real();
    im[i] = spec[i].imag();
  }
  return {re, im};
}

/// Adjoint of x -> (Re F x, Im F x) applied to (gr, gi): Re(sum_k (gr_k + i gi_k) e^{+i theta}).
inline Tensor dft2_parts_adjoint(const Tensor& gr, const Tensor& gi) {
  gr.require_same_shape(gi, "dft2_parts_adjoint");
  require_fft_extents(gr.shape());
  const std::size_t h = gr.dim(2), w = gr.dim(3), planes = gr.numel() / (h * w);
  // sum_k G_k e^{+i theta} = conj(FFT(conj G)), and the real part is unaffected by the outer conj.
  std::vector<Complex> buf(gr.numel());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = Complex(gr[i], -gi[i]);
  for (std::size_t p = 0; p < planes; ++p) fft2_inplace(std::span(buf).subspan(p * h * w, h * w), h, w, -1);
  Tensor out(gr.shape());
  for (std::size_t i = 0; i < buf.size(); ++i) out[i] = buf[i].real();
  return out;
}

/// |F(x)| per [H, W] plane, unnormalized forward transform. Bins with zero
/// magnitude pass no gradient.
inline Var dft2_magnitude(const Var& x) {
  auto spec = dft2_spectrum(x.value());
  Tensor mag(x.shape());
  for (std::size_t i = 0; i < spec.size(); ++i) mag[i] = std::abs(spec[i]);
  const std::size_t xi = x.id();
  return x.tape().record(std::move(mag), {x}, [xi, spec = std::move(spec)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& m = t.value(self);
    Tensor gr(g.shape()), gi(g.shape());
    for (std::size_t i = 0; i < spec.size(); ++i) {
      if (m[i] == 0.0) continue;
      gr[i] = g[i] * spec[i].real() / m[i];
      gi[i] = g[i] * spec[i].imag() / m[i];
    }
    t.grad(xi) += dft2_parts_adjoint(gr, gi);
  });
}

}  // namespace vlseg
