#pragma once

// Segmentation objectives: Dice, spectral magnitude consistency, prediction
// entropy, their weighted sum, and binary cross-entropy.

#include <cmath>
#include <cstddef>
#include <string>

#include "vlseg/autodiff.hpp"
#include "vlseg/fft.hpp"
#include "vlseg/ops.hpp"

namespace vlseg {

struct LossWeights {
  double lambda_f = 0.3;
  double lambda_e = 0.1;
  double eps = 1e-6;    // Dice stabilizer
  double delta = 1e-10;  // log stabilizer

  void validate() const {
    if (!(std::isfinite(lambda_f) && lambda_f >= 0.0 && std::isfinite(lambda_e) && lambda_e >= 0.0)) {
      throw ConfigError("loss weights must be finite and nonnegative");
    }
  }
};

enum class LossMode { seu, dice, bce };

inline const char* loss_mode_name(LossMode m) {
  switch (m) {
    case LossMode::seu:
      return "seu";
    case LossMode::dice:
      return "dice";
    case LossMode::bce:
      return "bce";
  }
  return "?";
}

/// Throws DataError unless every pixel of [B, C, H, W] is a 0/1 vector with exactly one 1.
inline void require_one_hot(const Tensor& g) {
  if (g.rank() != 4) throw DimensionError("one-hot mask must be [B, C, H, W], got " + shape_str(g.shape()));
  const std::size_t B = g.dim(0), C = g.dim(1), HW = g.dim(2) * g.dim(3);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < HW; ++i) {
      double total = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const double v = g[(b * C + c) * HW + i];
        if (v != 0.0 && v != 1.0) throw DataError("mask is not one-hot: value " + std::to_string(v));
        total += v;
      }
      if (total != 1.0) {
        throw DataError("mask is not one-hot at sample " + std::to_string(b) + ", pixel " + std::to_string(i));
      }
    }
  }
}

namespace detail {

inline void require_pair(const Var& y, const Tensor& g, const char* op) {
  if (y.shape() != g.shape()) {
    throw DimensionError(std::string(op) + ": prediction " + shape_str(y.shape()) + " vs target " +
                         shape_str(g.shape()));
  }
}

}  // namespace detail

/// Batch mean of per-sample 1 - (2 sum(y g) + eps) / (sum y + sum g + eps).
inline Var dice_loss(const Var& y, const Tensor& g, double eps = 1e-6) {
  detail::require_pair(y, g, "dice_loss");
  require_one_hot(g);
  Tape& t = y.tape();
  Var gv = t.constant(g);
  Var inter = sum_per_sample(mul(y, gv));
  Var denom = add_scalar(add(sum_per_sample(y), sum_per_sample(gv)), eps);
  Var ratio = div(add_scalar(scale(inter, 2.0), eps), denom);
  return add_scalar(neg(mean(ratio)), 1.0);
}

/// Mean over all bins of (|F(y)| - |F(g)|)^2.
inline Var spectral_consistency(const Var& y, const Tensor& g) {
  detail::require_pair(y, g, "spectral_consistency");
  Tape& t = y.tape();
  Var target = dft2_magnitude(t.constant(g));
  return mean(square(sub(dft2_magnitude(y), target)));
}

/// -(1 / (B H W)) sum y log(y + delta); the class axis is summed, not averaged.
inline Var entropy_regularizer(const Var& y, double delta = 1e-10) {
  const Shape& s = y.shape();
  if (s.size() != 4) throw DimensionError("entropy_regularizer expects [B, C, H, W], got " + shape_str(s));
  const double norm = static_cast<double>(s[0] * s[2] * s[3]);
  return scale(sum(mul(y, log(y, delta))), -1.0 / norm);
}

/// Elementwise mean of -[g log(y + delta) + (1 - g) log(1 - y + delta)].
inline Var bce_loss(const Var& y, const Tensor& g, double delta = 1e-10) {
  detail::require_pair(y, g, "bce_loss");
  Tape& t = y.tape();
  Tensor one_minus_g = g;
  for (double& v : one_minus_g.data()) v = 1.0 - v;
  Var pos = mul(t.constant(g), log(y, delta));
  Var neg_term = mul(t.constant(one_minus_g), log(add_scalar(neg(y), 1.0), delta));
  return neg(mean(add(pos, neg_term)));
}

struct LossBreakdown {
  Var dice;
  Var spectral;
  Var entropy;
  Var total;

  double dice_value() const { return dice.value().item(); }
  double spectral_value() const { return spectral.value().item(); }
  double entropy_value() const { return entropy.value().item(); }
  double total_value() const { return total.value().item(); }
};

/// dice + lambda_f spectral + lambda_e entropy.
inline LossBreakdown seu_loss(const Var& y, const Tensor& g, const LossWeights& w = {}) {
  w.validate();
  LossBreakdown out;
  out.dice = dice_loss(y, g, w.eps);
  out.spectral = spectral_consistency(y, g);
  out.entropy = entropy_regularizer(y, w.delta);
  out.total = add(add(out.dice, scale(out.spectral, w.lambda_f)), scale(out.entropy, w.lambda_e));
  return out;
}

/// Training objective for a loss mode. All three SEU terms are reported in
/// every mode; only `total` differs.
inline LossBreakdown training_loss(LossMode mode, const Var& y, const Tensor& g, const LossWeights& w = {}) {
  switch (mode) {
    case LossMode::seu:
      return seu_loss(y, g, w);
    case LossMode::dice: {
      LossWeights dice_only = w;
      dice_only.lambda_f = dice_only.lambda_e = 0.0;
      return seu_loss(y, g, dice_only);
    }
    case LossMode::bce: {
      LossBreakdown out = seu_loss(y, g, w);
      out.total = bce_loss(y, g, w.delta);
      return out;
    }
  }
  throw ConfigError("unknown loss mode");
}

}  // namespace vlseg
