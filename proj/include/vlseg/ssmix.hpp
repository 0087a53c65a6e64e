#pragma once

// State space mixer: projection, split, depthwise convolutions, softplus step
// sizes, selective scan with diagonal transitions, gated skip and output
// projection.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "vlseg/attention.hpp"
#include "vlseg/autodiff.hpp"
#include "vlseg/conv.hpp"
#include "vlseg/ops.hpp"
#include "vlseg/random.hpp"

namespace vlseg {

struct SSMixConfig {
  std::size_t d_model = 4;
  std::size_t expansion = 2;
  std::size_t d_state = 8;
  std::size_t kernel = 3;
  std::size_t out_width = 4;

  std::size_t d_inner() const { return expansion * d_model; }

  void validate() const {
    if (d_model == 0 || out_width == 0 || d_state == 0) throw ConfigError("ssmix: widths must be positive");
    if (expansion < 1) throw ConfigError("ssmix: expansion factor must be >= 1");
    if (kernel % 2 == 0) throw ConfigError("ssmix: conv kernel must be odd, got " + std::to_string(kernel));
  }
};

struct SSMixParams {
  Parameter w_in;        // [D, 2 d_inner]
  Parameter b_in;        // [2 d_inner]
  Parameter conv_x;      // [d_inner, k]
  Parameter conv_x_bias; // [d_inner]
  Parameter conv_z;      // [d_inner, k]
  Parameter conv_z_bias; // [d_inner]
  Parameter w_dbc;       // [d_inner, d_inner + 2 d_state]
  Parameter bias_delta;  // [d_inner]
  Parameter a_log;       // [d_inner, d_state], A = -exp(a_log)
  Parameter e;           // [d_inner]
  Parameter w_out;       // [2 d_inner, Y]
  Parameter b_out;       // [Y]

  static SSMixParams init(const std::string& prefix, const SSMixConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t D = cfg.d_model, di = cfg.d_inner(), ds = cfg.d_state, k = cfg.kernel;
    SSMixParams p;
    p.w_in = xavier_param(prefix + ".w_in", D, 2 * di, rng);
    p.b_in = Parameter(prefix + ".b_in", Tensor({2 * di}));
    const double cl = 1.0 / std::sqrt(static_cast<double>(k));
    p.conv_x = Parameter(prefix + ".conv_x", random_uniform({di, k}, rng, -cl, cl));
    p.conv_x_bias = Parameter(prefix + ".conv_x_bias", Tensor({di}));
    p.conv_z = Parameter(prefix + ".conv_z", random_uniform({di, k}, rng, -cl, cl));
    p.conv_z_bias = Parameter(prefix + ".conv_z_bias", Tensor({di}));
    p.w_dbc = xavier_param(prefix + ".w_dbc", di, di + 2 * ds, rng);
    // Softplus(bias_delta) log-uniform in [1e-3, 1e-1]; bias is its inverse softplus.
    Tensor bd({di});
    for (std::size_t c = 0; c < di; ++c) {
      const double step = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      bd[c] = step + std::log(-std::expm1(-step));
    }
    p.bias_delta = Parameter(prefix + ".bias_delta", std::move(bd));
    Tensor al({di, ds});
    for (std::size_t c = 0; c < di; ++c)
      for (std::size_t s = 0; s < ds; ++s) al[c * ds + s] = std::log(static_cast<double>(s + 1));
    p.a_log = Parameter(prefix + ".a_log", std::move(al));
    p.e = Parameter(prefix + ".e", Tensor({di}, 1.0));
    p.w_out = xavier_param(prefix + ".w_out", 2 * di, cfg.out_width, rng);
    p.b_out = Parameter(prefix + ".b_out", Tensor({cfg.out_width}));
    return p;
  }

  std::vector<Parameter*> parameters() {
    return {&w_in, &b_in, &conv_x, &conv_x_bias, &conv_z, &conv_z_bias,
            &w_dbc, &bias_delta, &a_log, &e, &w_out, &b_out};
  }
};

/// Softplus(raw + bias) with bias [d_inner] broadcast over [B, d_inner, N].
inline Var delta_reparam(const Var& raw, const Var& bias) {
  const Shape& s = raw.shape();
  if (s.size() != 3 || bias.shape() != Shape{s[1]}) {
    throw DimensionError("delta_reparam: raw " + shape_str(s) + " with bias " + shape_str(bias.shape()));
  }
  return softplus(add(raw, broadcast_to(reshape(bias, {1, s[1], 1}), s)));
}

namespace detail {

inline void check_scan_shapes(const Shape& u, const Shape& delta, const Shape& a, const Shape& bt, const Shape& ct,
                              const Shape& e) {
  bool ok = u.size() == 3 && delta == u && a.size() == 2 && a[0] == u[1] && bt.size() == 3 && bt[0] == u[0] &&
            bt[1] == a[1] && bt[2] == u[2] && ct == bt && e == Shape{u[1]};
  if (!ok) {
    throw DimensionError("selective_scan: u " + shape_str(u) + ", delta " + shape_str(delta) + ", A " + shape_str(a) +
                         ", B " + shape_str(bt) + ", C " + shape_str(ct) + ", E " + shape_str(e));
  }
}

inline void check_steps(const Tensor& delta) {
  for (double d : delta.data()) {
    if (!(d >= 0.0)) throw ContractError("selective_scan: step sizes must be nonnegative, got " + std::to_string(d));
  }
}

}  // namespace detail

/// Selective scan with zero-order-hold transitions and Euler input term:
///   h[c,s,t] = exp(delta[c,t] A[c,s]) h[c,s,t-1] + delta[c,t] B[s,t] u[c,t]
///   y[c,t]   = sum_s C[s,t] h[c,s,t] + E[c] u[c,t]
/// u, delta [B, d_inner, N]; A [d_inner, d_state]; B, C [B, d_state, N]; E [d_inner].
inline Var selective_scan(const Var& u, const Var& delta, const Var& a, const Var& bt, const Var& ct, const Var& e) {
  Tape& tape = u.tape();
  detail::check_scan_shapes(u.shape(), delta.shape(), a.shape(), bt.shape(), ct.shape(), e.shape());
  detail::check_steps(delta.value());
  const std::size_t Bn = u.shape()[0], Di = u.shape()[1], N = u.shape()[2], Ds = a.shape()[1];
  const Tensor& uv = u.value();
  const Tensor& dv = delta.value();
  const Tensor& av = a.value();
  const Tensor& bv = bt.value();
  const Tensor& cv = ct.value();
  const Tensor& ev = e.value();
  Tensor y({Bn, Di, N});
  // Every state h[b,c,:,t] is kept for the reverse sweep.
  std::vector<double> states(Bn * Di * N * Ds);
  std::vector<double> h(Ds);
  for (std::size_t b = 0; b < Bn; ++b) {
    for (std::size_t c = 0; c < Di; ++c) {
      std::fill(h.begin(), h.end(), 0.0);
      const std::size_t uc = (b * Di + c) * N;
      for (std::size_t t = 0; t < N; ++t) {
        const double d = dv[uc + t], x = uv[uc + t];
        double acc = ev[c] * x;
        for (std::size_t s = 0; s < Ds; ++s) {
          const std::size_t bs = (b * Ds + s) * N + t;
          h[s] = std::exp(d * av[c * Ds + s]) * h[s] + d * bv[bs] * x;
          acc += cv[bs] * h[s];
        }
        std::copy(h.begin(), h.end(), states.begin() + static_cast<std::ptrdiff_t>((uc + t) * Ds));
        y[uc + t] = acc;
      }
    }
  }
  const std::size_t ui = u.id(), di = delta.id(), ai = a.id(), bi = bt.id(), ci = ct.id(), ei = e.id();
  return tape.record(
      std::move(y), {u, delta, a, bt, ct, e},
      [=, states = std::move(states)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& uv = t.value(ui);
        const Tensor& dv = t.value(di);
        const Tensor& av = t.value(ai);
        const Tensor& bv = t.value(bi);
        const Tensor& cv = t.value(ci);
        const Tensor& ev = t.value(ei);
        double* gu = t.wants_grad(ui) ? t.grad(ui).data().data() : nullptr;
        double* gd = t.wants_grad(di) ? t.grad(di).data().data() : nullptr;
        double* ga = t.wants_grad(ai) ? t.grad(ai).data().data() : nullptr;
        double* gb = t.wants_grad(bi) ? t.grad(bi).data().data() : nullptr;
        double* gc = t.wants_grad(ci) ? t.grad(ci).data().data() : nullptr;
        double* ge = t.wants_grad(ei) ? t.grad(ei).data().data() : nullptr;
        std::vector<double> gh(Ds), decay_next(Ds);
        for (std::size_t b = 0; b < Bn; ++b) {
          for (std::size_t c = 0; c < Di; ++c) {
            const std::size_t uc = (b * Di + c) * N;
            std::fill(gh.begin(), gh.end(), 0.0);
            for (std::size_t step = N; step-- > 0;) {
              const double gy = g[uc + step], d = dv[uc + step], x = uv[uc + step];
              const double* hs = states.data() + (uc + step) * Ds;
              const double* hprev = step > 0 ? states.data() + (uc + step - 1) * Ds : nullptr;
              if (ge) ge[c] += gy * x;
              double dx = ev[c] * gy;
              double dd = 0.0;
              for (std::size_t s = 0; s < Ds; ++s) {
                const std::size_t bs = (b * Ds + s) * N + step;
                // Gradient reaching h[s] at this step: output read-out plus carry from step+1.
                const double gs = gh[s] + cv[bs] * gy;
                if (gc) gc[bs] += gy * hs[s];
                const double decay = std::exp(d * av[c * Ds + s]);
                const double hp = hprev ? hprev[s] : 0.0;
                const double g_decay = gs * hp;
                dd += g_decay * decay * av[c * Ds + s] + gs * bv[bs] * x;
                if (ga) ga[c * Ds + s] += g_decay * decay * d;
                if (gb) gb[bs] += gs * d * x;
                dx += gs * d * bv[bs];
                gh[s] = gs * decay;
              }
              if (gu) gu[uc + step] += dx;
              if (gd) gd[uc + step] += dd;
            }
          }
        }
      });
}

/// Literal per-timestep evaluation of the same recurrence on plain tensors:
/// one explicit state vector per channel, updated step by step.
inline Tensor selective_scan_oracle(const Tensor& u, const Tensor& delta, const Tensor& a, const Tensor& bt,
                                    const Tensor& ct, const Tensor& e) {
  detail::check_scan_shapes(u.shape(), delta.shape(), a.shape(), bt.shape(), ct.shape(), e.shape());
  detail::check_steps(delta);
  const std::size_t batch = u.dim(0), channels = u.dim(1), steps = u.dim(2), states = a.dim(1);
  Tensor y(u.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<std::vector<double>> h(channels, std::vector<double>(states, 0.0));
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t c = 0; c < channels; ++c) {
        std::vector<double> next(states);
        for (std::size_t s = 0; s < states; ++s) {
          const double a_bar = std::exp(delta.at(b, c, t) * a.at(c, s));
          const double b_bar = delta.at(b, c, t) * bt.at(b, s, t);
          next[s] = a_bar * h[c][s] + b_bar * u.at(b, c, t);
        }
        h[c] = next;
        double out = 0.0;
        for (std::size_t s = 0; s < states; ++s) out += ct.at(b, s, t) * h[c][s];
        y.at(b, c, t) = out + e.at(c) * u.at(b, c, t);
      }
    }
  }
  return y;
}

/// t_in [B, N, D] -> [B, N, Y].
inline Var ssmix_forward(const Var& t_in, const SSMixConfig& cfg, SSMixParams& p) {
  cfg.validate();
  Tape& tape = t_in.tape();
  const Shape& s = t_in.shape();
  if (s.size() != 3 || s[2] != cfg.d_model) {
    throw DimensionError("ssmix: input " + shape_str(s) + " but d_model = " + std::to_string(cfg.d_model));
  }
  const std::size_t di = cfg.d_inner(), ds = cfg.d_state;
  Var projected = linear(t_in, tape.param(p.w_in), tape.param(p.b_in));  // [B, N, 2 di]
  Var channels_first = permute(projected, {0, 2, 1});                    // [B, 2 di, N]
  Var pp = slice(channels_first, 1, 0, di);
  Var qq = slice(channels_first, 1, di, di);
  Var p_tilde = tanh(conv1d_depthwise(pp, tape.param(p.conv_x), tape.param(p.conv_x_bias)));
  Var q_tilde = tanh(conv1d_depthwise(qq, tape.param(p.conv_z), tape.param(p.conv_z_bias)));
  Var dbc = permute(matmul(permute(p_tilde, {0, 2, 1}), tape.param(p.w_dbc)), {0, 2, 1});  // [B, di+2ds, N]
  Var delta = delta_reparam(slice(dbc, 1, 0, di), tape.param(p.bias_delta));
  Var b_t = slice(dbc, 1, di, ds);
  Var c_t = slice(dbc, 1, di + ds, ds);
  Var a = neg(exp(tape.param(p.a_log)));
  Var scan = selective_scan(p_tilde, delta, a, b_t, c_t, tape.param(p.e));
  Var mixed = permute(concat({scan, q_tilde}, 1), {0, 2, 1});  // [B, N, 2 di]
  return linear(mixed, tape.param(p.w_out), tape.param(p.b_out));
}

}  // namespace vlseg
