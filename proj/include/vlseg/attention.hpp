#pragma once

// Sinusoidal positional encoding and multi-head self/cross attention.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "vlseg/autodiff.hpp"
#include "vlseg/ops.hpp"
#include "vlseg/random.hpp"

namespace vlseg {

/// Xavier-uniform initialized [fan_in, fan_out] matrix.
inline Parameter xavier_param(std::string name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return Parameter(std::move(name), random_uniform({fan_in, fan_out}, rng, -limit, limit));
}

/// PE[t, 2i] = sin(t / 10000^(2i/d)), PE[t, 2i+1] = cos(t / 10000^(2i/d)).
/// With odd d the trailing column is a sine column.
inline Tensor sinusoidal_table(std::size_t tokens, std::size_t d) {
  Tensor pe({tokens, d});
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      const double expo = static_cast<double>(j - j % 2) / static_cast<double>(d);
      const double angle = static_cast<double>(t) / std::pow(10000.0, expo);
      pe[t * d + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

/// x [B, T, d] plus the fixed positional table (no learnable state).
inline Var sinusoidal_pe(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw DimensionError("sinusoidal_pe expects [B, T, d], got " + shape_str(s));
  Var table = x.tape().constant(sinusoidal_table(s[1], s[2]));
  return add(x, broadcast_to(table, s));
}

struct AttnParams {
  std::size_t heads = 1;
  std::size_t head_dim = 1;
  Parameter w_q;  // [d_feat, heads * head_dim], head j owns columns [j*head_dim, (j+1)*head_dim)
  Parameter w_k;
  Parameter w_v;
  Parameter w_o;  // [heads * head_dim, d_feat]

  static AttnParams init(const std::string& prefix, std::size_t d_feat, std::size_t heads, Rng& rng) {
    if (heads == 0 || d_feat % heads != 0) {
      throw ConfigError("attention: feature width " + std::to_string(d_feat) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
    AttnParams p;
    p.heads = heads;
    p.head_dim = d_feat / heads;
    const std::size_t inner = heads * p.head_dim;
    p.w_q = xavier_param(prefix + ".w_q", d_feat, inner, rng);
    p.w_k = xavier_param(prefix + ".w_k", d_feat, inner, rng);
    p.w_v = xavier_param(prefix + ".w_v", d_feat, inner, rng);
    p.w_o = xavier_param(prefix + ".w_o", inner, d_feat, rng);
    return p;
  }

  std::size_t d_feat() const { return w_q.value.dim(0); }

  std::vector<Parameter*> parameters() { return {&w_q, &w_k, &w_v, &w_o}; }
};

/// Optional sink for the softmax weights, [B, heads, Tq, Tk].
struct AttnTrace {
  Tensor weights;
};

namespace detail {

inline Var split_heads(const Var& x, std::size_t heads, std::size_t head_dim) {
  const Shape& s = x.shape();
  return permute(reshape(x, {s[0], s[1], heads, head_dim}), {0, 2, 1, 3});
}

inline Var attend(const Var& q_in, const Var& k_in, const Var& v_in, AttnParams& p, AttnTrace* trace) {
  Tape& tape = q_in.tape();
  const Shape& qs = q_in.shape();
  const Shape& ks = k_in.shape();
  if (qs.size() != 3 || ks.size() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || v_in.shape() != ks) {
    throw DimensionError("attention: query " + shape_str(qs) + " vs key/value " + shape_str(ks));
  }
  if (qs[2] != p.d_feat()) {
    throw DimensionError("attention: feature width " + std::to_string(qs[2]) + " but parameters expect " +
                         std::to_string(p.d_feat()));
  }
  const std::size_t B = qs[0], Tq = qs[1];
  Var q = split_heads(matmul(q_in, tape.param(p.w_q)), p.heads, p.head_dim);
  Var k = split_heads(matmul(k_in, tape.param(p.w_k)), p.heads, p.head_dim);
  Var v = split_heads(matmul(v_in, tape.param(p.w_v)), p.heads, p.head_dim);
  Var scores = scale(matmul(q, transpose_last(k)), 1.0 / std::sqrt(static_cast<double>(p.head_dim)));
  Var weights = softmax_lastdim(scores);
  if (trace) trace->weights = weights.value();
  Var heads = permute(matmul(weights, v), {0, 2, 1, 3});
  Var merged = reshape(heads, {B, Tq, p.heads * p.head_dim});
  return matmul(merged, tape.param(p.w_o));
}

}  // namespace detail

/// Multi-head self-attention over [B, T, d_feat]; no masking.
inline Var mhsa(const Var& x, AttnParams& p, AttnTrace* trace = nullptr) {
  return detail::attend(x, x, x, p, trace);
}

/// Multi-head cross-attention: queries from q_src, keys from kv_src (plus the
/// positional table when key_positional is set) and values from raw kv_src.
inline Var mhca(const Var& q_src, const Var& kv_src, AttnParams& p, bool key_positional = true,
                AttnTrace* trace = nullptr) {
  Var keys = key_positional ? sinusoidal_pe(kv_src) : kv_src;
  return detail::attend(q_src, keys, kv_src, p, trace);
}

}  // namespace vlseg
