#pragma once

// AdamW with decoupled weight decay, cosine learning rate schedule, and the
// early stopping rule.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "vlseg/autodiff.hpp"
#include "vlseg/errors.hpp"

namespace vlseg {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct OptimState {
  std::vector<Tensor> m;  // first moments, one per parameter
  std::vector<Tensor> v;  // second moments
  std::size_t step = 0;
};

/// One AdamW update. Every gradient is checked before anything is modified,
/// so a non-finite gradient leaves parameters and state untouched.
///
///   theta <- theta - lr wd theta
///   theta <- theta - lr m_hat / (sqrt(v_hat) + eps)
inline void adamw_step(const std::vector<Parameter*>& params, OptimState& state, double lr,
                       const AdamWOptions& o = {}) {
  if (state.m.empty()) {
    for (Parameter* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adamw_step: state holds " + std::to_string(state.m.size()) + " moments for " +
                        std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = *params[i];
    if (p.grad.empty()) continue;
    if (p.grad.shape() != p.value.shape() || state.m[i].shape() != p.value.shape()) {
      throw DimensionError("adamw_step: '" + p.name + "' value " + shape_str(p.value.shape()) + ", grad " +
                           shape_str(p.grad.shape()) + ", moments " + shape_str(state.m[i].shape()));
    }
    for (double g : p.grad.data()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t), c2 = 1.0 - std::pow(o.beta2, t);
  const double shrink = 1.0 - lr * o.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    auto theta = p.value.data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    const bool has_grad = !p.grad.empty();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = has_grad ? p.grad[j] : 0.0;
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * g;
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * g * g;
      theta[j] *= shrink;
      theta[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + o.eps);
    }
  }
}

/// lr_min + (lr0 - lr_min)(1 + cos(pi min(epoch, T) / T)) / 2
inline double cosine_lr(std::size_t epoch, double lr0, double lr_min, std::size_t t_max) {
  if (t_max == 0) throw ConfigError("cosine_lr: t_max must be positive");
  const double frac = static_cast<double>(std::min(epoch, t_max)) / static_cast<double>(t_max);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

/// Tracks validation scores. Training stops after an epoch (1-based) that is
/// at least `min_epochs` once `patience` consecutive epochs, and at least one,
/// have passed without a strict improvement.
class EarlyStopping {
 public:
  EarlyStopping(std::size_t patience, std::size_t min_epochs) : patience_(patience), min_epochs_(min_epochs) {}

  /// Records the score of `epoch`; returns true when it is a new best.
  bool observe(std::size_t epoch, double score) {
    epoch_ = epoch;
    if (best_epoch_ == 0 || score > best_) {
      best_ = score;
      best_epoch_ = epoch;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }

  bool should_stop() const { return epoch_ >= min_epochs_ && stale_ > 0 && stale_ >= patience_; }

  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }
  std::size_t stale() const { return stale_; }

 private:
  std::size_t patience_;
  std::size_t min_epochs_;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t stale_ = 0;
  double best_ = 0.0;
};

}  // namespace vlseg
