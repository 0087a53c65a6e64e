#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vlseg/autodiff.hpp"
#include "vlseg/errors.hpp"
#include "vlseg/random.hpp"

namespace vlseg {

struct GradCheckOptions {
  double step = 1e-5;
  /// Parameters with more entries than this are checked on a random subset.
  std::size_t max_coords = 200;
  std::uint64_t seed = 0x5eed;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  double max_abs_error = 0.0;  // max |analytic - numeric| over checked coordinates
  std::size_t coords_checked = 0;
};

/// Builds a scalar loss on the given tape from the current parameter values.
using ScalarFn = std::function<Var(Tape&)>;

inline double grad_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Compare reverse-mode gradients against central differences.
///
/// `label` names the function under test in NaN diagnostics.
inline GradCheckResult grad_check(const ScalarFn& f, const std::vector<Parameter*>& params,
                                  const GradCheckOptions& opts = {}, const std::string& label = "function") {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = f(tape);
    if (std::isnan(loss.value().item())) throw ContractError("grad_check: NaN loss from " + label);
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape tape;
    return f(tape).value().item();
  };
  Rng rng(opts.seed);
  GradCheckResult res;
  for (Parameter* p : params) {
    const std::size_t n = p->value.numel();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (n > opts.max_coords) {
      rng.shuffle(coords);
      coords.resize(opts.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double saved = p->value[i];
      p->value[i] = saved + opts.step;
      const double up = eval();
      p->value[i] = saved - opts.step;
      const double down = eval();
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double analytic = p->grad[i];
      if (std::isnan(numeric) || std::isnan(analytic)) {
        throw ContractError("grad_check: NaN gradient estimate in " + label + " for " + p->name + "[" +
                            std::to_string(i) + "]");
      }
      const double err = grad_rel_error(analytic, numeric);
      ++res.coords_checked;
      res.max_abs_error = std::max(res.max_abs_error, std::abs(analytic - numeric));
      if (err > res.max_rel_error || res.worst_param.empty()) {
        res.max_rel_error = std::max(err, res.max_rel_error);
        res.worst_param = p->name;
        res.worst_index = i;
        res.worst_analytic = analytic;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

/// Move entries lying within `band` of zero (a kink for leaky ReLU) out to +shift.
inline void nudge_from_kinks(Tensor& t, double band = 0.02, double shift = 0.05) {
  for (double& v : t.data()) {
    if (std::abs(v) < band) v += shift;
  }
}

}  // namespace vlseg
