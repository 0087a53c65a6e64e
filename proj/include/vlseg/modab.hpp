#pragma once

// Modality decoding attention block: text projection through the state space
// mixer, visual self-attention, cross-attention into text, alpha-gated residual.

#include <cstddef>
#include <string>
#include <vector>

#include "vlseg/attention.hpp"
#include "vlseg/autodiff.hpp"
#include "vlseg/ops.hpp"
#include "vlseg/random.hpp"
#include "vlseg/ssmix.hpp"

namespace vlseg {

/// Architectural variants used by the ablation grid.
enum class ArchMode {
  full,
  ssmix_linear,   // SSMix replaced by one Linear(Y -> Y)
  crossattn_add,  // cross-attention replaced by adding mean-pooled projected text
};

inline const char* arch_mode_name(ArchMode m) {
  switch (m) {
    case ArchMode::full:
      return "full";
    case ArchMode::ssmix_linear:
      return "ssmix_linear";
    case ArchMode::crossattn_add:
      return "crossattn_add";
  }
  return "?";
}

struct LayerNormParams {
  Parameter gain;
  Parameter bias;

  static LayerNormParams init(const std::string& prefix, std::size_t width) {
    return {Parameter(prefix + ".gain", Tensor({width}, 1.0)), Parameter(prefix + ".bias", Tensor({width}))};
  }

  Var apply(const Var& x) { return layer_norm(x, x.tape().param(gain), x.tape().param(bias)); }
};

struct ModabParams {
  std::size_t width = 0;  // Y, the flattened spatial extent of the visual stage
  Parameter text_proj;    // [D_text, Y]
  Parameter text_proj_bias;
  SSMixConfig ssmix_cfg;
  SSMixParams ssmix;
  Parameter mix_linear;  // [Y, Y], used only by ArchMode::ssmix_linear
  Parameter mix_linear_bias;
  AttnParams self_attn;
  AttnParams cross_attn;
  LayerNormParams ln_in, ln_sa, ln_q, ln_out;
  Parameter alpha;  // [1]

  /// `ssm` supplies expansion, state size and kernel; its widths are set to Y.
  static ModabParams init(const std::string& prefix, std::size_t d_text, std::size_t width, std::size_t heads,
                          SSMixConfig ssm, ArchMode arch, Rng& rng) {
    ModabParams p;
    p.width = width;
    p.text_proj = xavier_param(prefix + ".text_proj", d_text, width, rng);
    p.text_proj_bias = Parameter(prefix + ".text_proj_bias", Tensor({width}));
    ssm.d_model = width;
    ssm.out_width = width;
    p.ssmix_cfg = ssm;
    if (arch == ArchMode::ssmix_linear) {
      p.mix_linear = xavier_param(prefix + ".mix_linear", width, width, rng);
      p.mix_linear_bias = Parameter(prefix + ".mix_linear_bias", Tensor({width}));
    } else {
      p.ssmix = SSMixParams::init(prefix + ".ssmix", ssm, rng);
    }
    p.self_attn = AttnParams::init(prefix + ".self_attn", width, heads, rng);
    if (arch != ArchMode::crossattn_add) p.cross_attn = AttnParams::init(prefix + ".cross_attn", width, heads, rng);
    p.ln_in = LayerNormParams::init(prefix + ".ln_in", width);
    p.ln_sa = LayerNormParams::init(prefix + ".ln_sa", width);
    p.ln_q = LayerNormParams::init(prefix + ".ln_q", width);
    p.ln_out = LayerNormParams::init(prefix + ".ln_out", width);
    p.alpha = Parameter(prefix + ".alpha", Tensor::scalar(rng.uniform(0.0, 0.1)));
    return p;
  }

  /// Parameters in use for the given variant.
  std::vector<Parameter*> parameters(ArchMode arch) {
    std::vector<Parameter*> out{&text_proj, &text_proj_bias};
    if (arch == ArchMode::ssmix_linear) {
      out.push_back(&mix_linear);
      out.push_back(&mix_linear_bias);
    } else {
      for (Parameter* q : ssmix.parameters()) out.push_back(q);
    }
    for (Parameter* q : self_attn.parameters()) out.push_back(q);
    if (arch != ArchMode::crossattn_add) {
      for (Parameter* q : cross_attn.parameters()) out.push_back(q);
    }
    for (LayerNormParams* ln : {&ln_in, &ln_sa, &ln_q, &ln_out}) {
      out.push_back(&ln->gain);
      out.push_back(&ln->bias);
    }
    out.push_back(&alpha);
    return out;
  }
};

/// Debug taps into one block evaluation.
struct ModabTrace {
  AttnTrace self_attn;
  AttnTrace cross_attn;
  Tensor text_features;  // T_SSMix [B, N, Y]
};

/// GELU(SSMix(LeakyReLU(Linear(t)))): [B, N, D_text] -> [B, N, Y].
inline Var text_projection_path(const Var& t, ModabParams& p, ArchMode arch = ArchMode::full) {
  Tape& tape = t.tape();
  const Shape& s = t.shape();
  if (s.size() != 3 || s[2] != p.text_proj.value.dim(0)) {
    throw DimensionError("text projection: input " + shape_str(s) + " but projection expects width " +
                         std::to_string(p.text_proj.value.dim(0)));
  }
  Var projected = leaky_relu(linear(t, tape.param(p.text_proj), tape.param(p.text_proj_bias)));
  Var mixed = arch == ArchMode::ssmix_linear
                  ? linear(projected, tape.param(p.mix_linear), tape.param(p.mix_linear_bias))
                  : ssmix_forward(projected, p.ssmix_cfg, p.ssmix);
  return gelu(mixed);
}

/// x [B, C, Y] (channels as tokens), t [B, N, D_text] -> F [B, C, Y].
inline Var modab_forward(const Var& x, const Var& t, ModabParams& p, ArchMode arch = ArchMode::full,
                         ModabTrace* trace = nullptr) {
  Tape& tape = x.tape();
  const Shape& xs = x.shape();
  if (xs.size() != 3 || xs[2] != p.width || t.shape().size() != 3 || t.shape()[0] != xs[0]) {
    throw DimensionError("modab: visual " + shape_str(xs) + " and text " + shape_str(t.shape()) +
                         " incompatible with block width " + std::to_string(p.width));
  }
  Var text = text_projection_path(t, p, arch);
  if (trace) trace->text_features = text.value();

  Var x_pe = sinusoidal_pe(p.ln_in.apply(x));
  Var x_sa = add(x_pe, p.ln_sa.apply(mhsa(x_pe, p.self_attn, trace ? &trace->self_attn : nullptr)));
  Var query = sinusoidal_pe(p.ln_q.apply(x_sa));
  Var x_ca;
  if (arch == ArchMode::crossattn_add) {
    Var pooled = mean_axis(text, 1);  // [B, 1, Y]
    x_ca = add(query, broadcast_to(pooled, query.shape()));
  } else {
    x_ca = mhca(query, text, p.cross_attn, true, trace ? &trace->cross_attn : nullptr);
  }
  Var gated = mul(broadcast_to(reshape(tape.param(p.alpha), {1, 1, 1}), xs), p.ln_out.apply(x_ca));
  return add(x, gated);
}

}  // namespace vlseg
