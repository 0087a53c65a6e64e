#pragma once

// Evaluation point and fixture for the end-to-end gradient check of the
// segmentation model under the SEU loss.
//
// Central differences in f64 resolve a gradient coordinate only to roughly
// ulp(loss) / h. The spectral term keeps the loss near 50, so coordinates
// below ~1e-4 sit at the noise floor. At initialization the gate alpha is
// small, the step sizes are tiny and every bias is exactly zero. That leaves
// the text path gradients many orders below the floor and parks the text
// projection on the LeakyReLU kink. Conditioning moves the parameters to a
// generic, well-scaled point before checking. It changes values only, never
// the code path.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "vlseg/gradcheck.hpp"
#include "vlseg/loss.hpp"
#include "vlseg/model.hpp"
#include "vlseg/random.hpp"
#include "vlseg/vocab.hpp"

namespace vlseg {

struct GradPointOptions {
  double bias_range = 0.1;  // biases drawn from U(-r, r)
  double alpha = 1.0;
  double delta_bias = 0.0;  // softplus(0) = ln 2
  double text_proj_scale = 4.0;
  double ssmix_in_scale = 3.0;
  double ssmix_dbc_scale = 3.0;
  double logit_gap = 3.0;  // largest |logit_1 - logit_0| over the batch after rescaling the head
  // Layer norm rows whose variance is comparable to its epsilon have huge
  // curvature; draws below this floor are rejected and redrawn.
  double min_norm_variance = 1e-4;
  int max_draws = 50;
};

namespace detail {

inline bool is_plain_bias(const std::string& name) {
  if (name.find("bias_delta") != std::string::npos) return false;
  auto ends_with = [&](const char* suffix) {
    const std::string s(suffix);
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return ends_with("bias") || ends_with(".b_in") || ends_with(".b_out");
}

inline double max_logit_gap(const Tensor& y) {
  const std::size_t B = y.dim(0), C = y.dim(1), HW = y.dim(2) * y.dim(3);
  double gap = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < HW; ++i) {
      double lo = INFINITY, hi = -INFINITY;
      for (std::size_t c = 0; c < C; ++c) {
        const double l = std::log(y[(b * C + c) * HW + i]);
        lo = std::min(lo, l);
        hi = std::max(hi, l);
      }
      gap = std::max(gap, hi - lo);
    }
  }
  return gap;
}

}  // namespace detail

namespace detail {

inline void condition_once(ModelParams& p, Rng& rng, const GradPointOptions& o) {
  for (Parameter* q : p.parameters()) {
    if (is_plain_bias(q->name)) {
      for (double& v : q->value.data()) v = rng.uniform(-o.bias_range, o.bias_range);
    }
  }
  for (ModabParams& m : p.modab) {
    m.alpha.value[0] = o.alpha;
    for (double& v : m.text_proj.value.data()) v *= o.text_proj_scale;
    nudge_from_kinks(m.text_proj_bias.value);
    if (m.ssmix.w_in.value.numel() > 0) {
      m.ssmix.bias_delta.value.fill(o.delta_bias);
      for (double& v : m.ssmix.a_log.value.data()) v = rng.uniform(-1.0, 0.0);
      for (double& v : m.ssmix.w_in.value.data()) v *= o.ssmix_in_scale;
      for (double& v : m.ssmix.w_dbc.value.data()) v *= o.ssmix_dbc_scale;
    }
  }
}

}  // namespace detail

/// Move `p` to a well-conditioned point for finite differences. Returns the
/// smallest layer norm row variance at the accepted point.
inline double condition_for_gradcheck(ModelParams& p, const Tensor& images, const std::vector<TokenIds>& tokens,
                                      Rng& rng, const GradPointOptions& o = {}) {
  const ModelParams start = p;
  double min_var = 0.0;
  for (int draw = 0; draw < o.max_draws; ++draw) {
    p = start;
    detail::condition_once(p, rng, o);
    min_var = INFINITY;
    Tensor y;
    {
      struct Watch {
        explicit Watch(double* v) { layer_norm_min_variance = v; }
        ~Watch() { layer_norm_min_variance = nullptr; }
      } watch(&min_var);
      Tape tape;
      y = model_forward(tape, p, images, tokens).value();
    }
    if (min_var < o.min_norm_variance) continue;
    // Logits are linear in the 1x1 head, so rescaling it sets the gap exactly.
    const double gap = detail::max_logit_gap(y);
    if (gap > 0.0) {
      const double s = o.logit_gap / gap;
      for (double& v : p.head.weight.value.data()) v *= s;
      for (double& v : p.head.bias.value.data()) v *= s;
    }
    return min_var;
  }
  throw ContractError("condition_for_gradcheck: no draw kept every layer norm row variance above " +
                      std::to_string(o.min_norm_variance));
}

/// Two-sample batch used by the end-to-end check.
struct GradCheckFixture {
  Tensor images;
  std::vector<TokenIds> tokens;
  Tensor masks;  // one-hot [2, classes, H, H]
};

inline GradCheckFixture make_gradcheck_fixture(const ModelConfig& cfg, Rng& rng) {
  const std::size_t H = cfg.image_size, HW = H * H, C = cfg.classes;
  GradCheckFixture fx;
  fx.images = random_uniform({2, 3, H, H}, rng, 0.0, 1.0);
  fx.tokens = {tokenize("segment the disc in the upper left", cfg.max_tokens),
               tokenize("segment the square in the lower right", cfg.max_tokens)};
  fx.masks = Tensor({2, C, H, H});
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t i = 0; i < HW; ++i) {
      const bool fg = i % H < H * 3 / 8 && i / H < H * (5 + 3 * b) / 16;
      fx.masks[(b * C + (fg ? 1 : 0)) * HW + i] = 1.0;
    }
  }
  return fx;
}

/// Configuration of the end-to-end check: H=32, one head so every stage
/// width divides, and a MoDAB at every stage so all block types are covered.
inline ModelConfig gradcheck_model_config() {
  ModelConfig cfg;
  cfg.image_size = 32;
  cfg.heads = 1;
  cfg.modab_all_stages = true;
  return cfg;
}

struct FullGradCheckReport {
  GradCheckResult overall;
  std::vector<std::pair<std::string, GradCheckResult>> per_parameter;
  double loss = 0.0;
  double step = 0.0;
  double min_norm_variance = 0.0;

  /// Central-difference resolution set by rounding of the loss: ulp(loss) / (2h).
  double roundoff_floor() const { return std::abs(loss) * std::numeric_limits<double>::epsilon() / (2.0 * step); }
};

/// Gradient check of SEU(model(x, t), g) with respect to every parameter.
inline FullGradCheckReport full_model_gradcheck(std::uint64_t seed = 7, std::size_t coords_per_param = 40,
                                                double step = 1e-4) {
  const ModelConfig cfg = gradcheck_model_config();
  ModelParams p = ModelParams::init(cfg, seed);
  Rng rng(3);
  const GradCheckFixture fx = make_gradcheck_fixture(cfg, rng);
  FullGradCheckReport rep;
  rep.min_norm_variance = condition_for_gradcheck(p, fx.images, fx.tokens, rng);
  rep.step = step;
  auto f = [&](Tape& t) { return seu_loss(model_forward(t, p, fx.images, fx.tokens), fx.masks).total; };
  {
    Tape t;
    rep.loss = f(t).value().item();
  }
  GradCheckOptions opts;
  opts.max_coords = coords_per_param;
  opts.step = step;
  for (Parameter* q : p.parameters()) {
    GradCheckResult r = grad_check(f, {q}, opts, "full model");
    rep.overall.coords_checked += r.coords_checked;
    const double abs_err = std::max(rep.overall.max_abs_error, r.max_abs_error);
    if (rep.per_parameter.empty() || r.max_rel_error > rep.overall.max_rel_error) {
      const std::size_t n = rep.overall.coords_checked;
      rep.overall = r;
      rep.overall.coords_checked = n;
    }
    rep.overall.max_abs_error = abs_err;
    rep.per_parameter.emplace_back(q->name, r);
  }
  return rep;
}

}  // namespace vlseg
