#pragma once

// Named gradient checks of every differentiable op and block, each on a small
// random input in a smooth region. Shared by the CLI and the acceptance run.

#include <functional>
#include <string>
#include <vector>

#include "vlseg/attention.hpp"
#include "vlseg/conv.hpp"
#include "vlseg/fft.hpp"
#include "vlseg/gradcheck.hpp"
#include "vlseg/loss.hpp"
#include "vlseg/modab.hpp"
#include "vlseg/ops.hpp"
#include "vlseg/random.hpp"
#include "vlseg/ssmix.hpp"

namespace vlseg {

using OpFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Gradient check of sum(w * op(inputs)) with fixed random weights w, so each
/// output element gets a distinct sensitivity.
inline GradCheckResult check_op(const OpFn& op, std::vector<Tensor> inputs, std::uint64_t seed = 11,
                                std::size_t max_coords = 200) {
  std::vector<Parameter> params;
  params.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) params.emplace_back("input" + std::to_string(i), inputs[i]);
  Tensor weights;
  Rng rng(seed);
  auto f = [&](Tape& tape) {
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(tape.param(p));
    Var out = op(tape, vars);
    if (weights.empty()) weights = random_uniform(out.shape(), rng, 0.5, 1.5);
    return sum(mul(out, tape.constant(weights)));
  };
  std::vector<Parameter*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  GradCheckOptions opts;
  opts.max_coords = max_coords;
  return grad_check(f, ptrs, opts, "op");
}

struct OpCheck {
  std::string name;
  std::function<GradCheckResult()> run;
};

namespace detail {

inline Tensor one_hot_mask(Rng& rng, std::size_t B, std::size_t H) {
  Tensor g({B, 2, H, H});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < H * H; ++i) g[(b * 2 + (rng.uniform() < 0.3 ? 1 : 0)) * H * H + i] = 1.0;
  return g;
}

inline Tensor two_class_probs(Rng& rng, std::size_t B, std::size_t H) {
  Tensor y({B, 2, H, H});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < H * H; ++i) {
      const double p = rng.uniform(0.05, 0.95);
      y[(b * 2 + 1) * H * H + i] = p;
      y[(b * 2) * H * H + i] = 1.0 - p;
    }
  return y;
}

inline GradCheckResult check_loss(const std::function<Var(const Var&, const Tensor&)>& loss, std::uint64_t seed) {
  Rng rng(seed);
  Tensor g = one_hot_mask(rng, 2, 8);
  Parameter p("y", two_class_probs(rng, 2, 8));
  return grad_check([&](Tape& t) { return loss(t.param(p), g); }, {&p}, {}, "loss");
}

inline SSMixConfig small_ssmix(std::size_t d_model, std::size_t out_width) {
  SSMixConfig s;
  s.d_model = d_model;
  s.expansion = 2;
  s.d_state = 3;
  s.kernel = 3;
  s.out_width = out_width;
  return s;
}

// Step sizes near 1, slow decay and biases off zero keep every gradient well
// above finite-difference roundoff.
inline void lift_ssmix(SSMixParams& p, Rng& rng) {
  for (Parameter* q : p.parameters())
    for (double& v : q->value.data()) v += rng.uniform(-0.1, 0.1);
  p.bias_delta.value.fill(0.5);
  for (double& v : p.a_log.value.data()) v = rng.uniform(-1.0, 0.0);
  for (double& v : p.w_in.value.data()) v *= 3.0;
  for (double& v : p.w_dbc.value.data()) v *= 3.0;
}

inline GradCheckResult check_modab(ArchMode arch, std::uint64_t seed) {
  Rng rng(seed);
  ModabParams p = ModabParams::init("m", 6, 4, 2, small_ssmix(6, 4), arch, rng);
  for (Parameter* q : p.parameters(arch))
    for (double& v : q->value.data()) v += rng.uniform(-0.1, 0.1);
  if (arch != ArchMode::ssmix_linear) {
    p.ssmix.bias_delta.value.fill(0.5);
    for (double& v : p.ssmix.a_log.value.data()) v = rng.uniform(-1.0, 0.0);
    for (double& v : p.ssmix.w_in.value.data()) v *= 3.0;
    for (double& v : p.ssmix.w_dbc.value.data()) v *= 3.0;
  }
  p.alpha.value[0] = 0.7;
  Tensor text = random_normal({2, 3, 6}, rng), w = random_uniform({2, 5, 4}, rng, 0.5, 1.5);
  Parameter x("x", random_normal({2, 5, 4}, rng));
  auto f = [&](Tape& t) { return sum(mul(modab_forward(t.param(x), t.constant(text), p, arch), t.constant(w))); };
  std::vector<Parameter*> ps = p.parameters(arch);
  ps.push_back(&x);
  return grad_check(f, ps, {}, "modab");
}

}  // namespace detail

inline std::vector<OpCheck> op_checks() {
  using V = const std::vector<Var>&;
  std::vector<OpCheck> c;
  auto unary = [&](const std::string& name, std::function<Var(const Var&)> op, Shape shape, double sd = 1.0) {
    c.push_back({name, [=] {
                   Rng rng(std::hash<std::string>{}(name));
                   Tensor x = random_normal(shape, rng, sd);
                   nudge_from_kinks(x);
                   return check_op([op](Tape&, V v) { return op(v[0]); }, {x});
                 }});
  };
  auto binary = [&](const std::string& name, std::function<Var(const Var&, const Var&)> op, Shape a, Shape b,
                    double lo = -1.0, double hi = 1.0) {
    c.push_back({name, [=] {
                   Rng rng(std::hash<std::string>{}(name));
                   Tensor x = random_normal(a, rng), y = random_uniform(b, rng, lo, hi);
                   return check_op([op](Tape&, V v) { return op(v[0], v[1]); }, {x, y});
                 }});
  };

  binary("add", [](const Var& a, const Var& b) { return add(a, b); }, {2, 3, 4}, {2, 3, 4});
  binary("sub", [](const Var& a, const Var& b) { return sub(a, b); }, {2, 3, 4}, {2, 3, 4});
  binary("mul", [](const Var& a, const Var& b) { return mul(a, b); }, {2, 3, 4}, {2, 3, 4});
  binary("div", [](const Var& a, const Var& b) { return div(a, b); }, {5}, {5}, 1.0, 2.0);
  unary("exp", [](const Var& x) { return exp(x); }, {3, 4});
  c.push_back({"log", [] {
                 Rng rng(5);
                 return check_op([](Tape&, V v) { return log(v[0]); }, {random_uniform({3, 4}, rng, 0.5, 2.0)});
               }});
  unary("square", [](const Var& x) { return square(x); }, {3, 4});
  unary("gelu", [](const Var& x) { return gelu(x); }, {4, 5}, 2.0);
  unary("leaky_relu", [](const Var& x) { return leaky_relu(x); }, {4, 5}, 2.0);
  unary("tanh", [](const Var& x) { return tanh(x); }, {4, 5}, 2.0);
  unary("softplus", [](const Var& x) { return softplus(x); }, {4, 5}, 2.0);
  unary("sigmoid", [](const Var& x) { return sigmoid(x); }, {4, 5}, 2.0);
  unary("permute", [](const Var& x) { return permute(x, {2, 0, 1}); }, {2, 3, 4});
  unary("broadcast_to", [](const Var& x) { return broadcast_to(x, {2, 3, 4}); }, {3, 1});
  unary("slice", [](const Var& x) { return slice(x, 2, 1, 2); }, {2, 3, 4});
  c.push_back({"concat", [] {
                 Rng rng(6);
                 return check_op([](Tape&, V v) { return concat({v[0], v[1]}, 1); },
                                 {random_normal({2, 3, 4}, rng), random_normal({2, 2, 4}, rng)});
               }});
  unary("mean_axis", [](const Var& x) { return mean_axis(x, 1); }, {2, 3, 4});
  unary("sum_per_sample", [](const Var& x) { return sum_per_sample(x); }, {3, 2, 2});
  c.push_back({"matmul", [] {
                 Rng rng(7);
                 return check_op([](Tape&, V v) { return matmul(v[0], v[1]); },
                                 {random_uniform({2, 3, 4}, rng), random_uniform({2, 4, 2}, rng)});
               }});
  c.push_back({"linear", [] {
                 Rng rng(8);
                 return check_op([](Tape&, V v) { return linear(v[0], v[1], v[2]); },
                                 {random_normal({2, 3, 4}, rng), random_normal({4, 5}, rng), random_normal({5}, rng)});
               }});
  unary("softmax", [](const Var& x) { return softmax_lastdim(x); }, {3, 5});
  unary("softmax_channels", [](const Var& x) { return softmax_channels(x); }, {2, 3, 2, 2});
  c.push_back({"layer_norm", [] {
                 Rng rng(9);
                 return check_op([](Tape&, V v) { return layer_norm(v[0], v[1], v[2]); },
                                 {random_normal({2, 3, 6}, rng), random_uniform({6}, rng, 0.5, 1.5),
                                  random_uniform({6}, rng)});
               }});
  c.push_back({"channel_norm", [] {
                 Rng rng(10);
                 return check_op([](Tape&, V v) { return channel_norm(v[0], v[1], v[2]); },
                                 {random_normal({2, 4, 3, 3}, rng), random_uniform({4}, rng, 0.5, 1.5),
                                  random_uniform({4}, rng)});
               }});
  c.push_back({"conv1d_depthwise", [] {
                 Rng rng(11);
                 return check_op([](Tape&, V v) { return conv1d_depthwise(v[0], v[1], v[2]); },
                                 {random_normal({2, 3, 6}, rng), random_normal({3, 3}, rng), random_normal({3}, rng)});
               }});
  c.push_back({"conv2d", [] {
                 Rng rng(12);
                 return check_op([](Tape&, V v) { return conv2d(v[0], v[1], v[2], 2, 1); },
                                 {random_normal({2, 2, 6, 6}, rng), random_normal({3, 2, 3, 3}, rng),
                                  random_normal({3}, rng)});
               }});
  c.push_back({"conv_transpose2d", [] {
                 Rng rng(13);
                 return check_op([](Tape&, V v) { return conv_transpose2d(v[0], v[1], v[2]); },
                                 {random_normal({2, 3, 2, 3}, rng), random_normal({3, 2, 2, 2}, rng),
                                  random_normal({2}, rng)});
               }});
  unary("pixel_shuffle", [](const Var& x) { return pixel_shuffle(x, 2); }, {2, 8, 2, 3});
  unary("pixel_unshuffle", [](const Var& x) { return pixel_unshuffle(x, 2); }, {2, 2, 4, 6});
  unary("avg_pool2d", [](const Var& x) { return avg_pool2d_padded(x, 3); }, {1, 2, 5, 5});
  c.push_back({"batch_norm2d", [] {
                 Rng rng(14);
                 BatchNormState state;
                 return check_op([&](Tape&, V v) { return batch_norm2d(v[0], v[1], v[2], state, true); },
                                 {random_normal({3, 2, 4, 4}, rng, 2.0), random_uniform({2}, rng, 0.5, 1.5),
                                  random_normal({2}, rng)});
               }});
  unary("dft2_magnitude", [](const Var& x) { return dft2_magnitude(x); }, {1, 2, 4, 8});
  unary("sinusoidal_pe", [](const Var& x) { return sinusoidal_pe(x); }, {2, 5, 6});
  c.push_back({"delta_reparam", [] {
                 Rng rng(15);
                 return check_op([](Tape&, V v) { return delta_reparam(v[0], v[1]); },
                                 {random_normal({2, 3, 4}, rng), random_normal({3}, rng)});
               }});
  c.push_back({"selective_scan", [] {
                 Rng rng(16);
                 const std::size_t B = 2, D = 3, S = 4, N = 7;
                 return check_op([](Tape&, V v) { return selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]); },
                                 {random_normal({B, D, N}, rng), random_uniform({B, D, N}, rng, 0.01, 1.0),
                                  random_uniform({D, S}, rng, -2.0, -0.1), random_normal({B, S, N}, rng),
                                  random_normal({B, S, N}, rng), random_normal({D}, rng)});
               }});
  c.push_back({"ssmix", [] {
                 Rng rng(17);
                 const SSMixConfig cfg = detail::small_ssmix(4, 5);
                 SSMixParams p = SSMixParams::init("ssm", cfg, rng);
                 detail::lift_ssmix(p, rng);
                 Parameter x("x", random_normal({2, 6, 4}, rng));
                 Tensor w = random_uniform({2, 6, 5}, rng, 0.5, 1.5);
                 auto f = [&](Tape& t) { return sum(mul(ssmix_forward(t.param(x), cfg, p), t.constant(w))); };
                 std::vector<Parameter*> ps = p.parameters();
                 ps.push_back(&x);
                 return grad_check(f, ps, {}, "ssmix");
               }});
  c.push_back({"mhsa", [] {
                 Rng rng(18);
                 AttnParams a = AttnParams::init("sa", 6, 2, rng);
                 Parameter x("x", random_normal({2, 3, 6}, rng));
                 Tensor w = random_uniform({2, 3, 6}, rng, 0.5, 1.5);
                 auto f = [&](Tape& t) { return sum(mul(mhsa(t.param(x), a), t.constant(w))); };
                 std::vector<Parameter*> ps = a.parameters();
                 ps.push_back(&x);
                 return grad_check(f, ps, {}, "mhsa");
               }});
  c.push_back({"mhca", [] {
                 Rng rng(19);
                 AttnParams a = AttnParams::init("ca", 6, 3, rng);
                 Parameter q("q", random_normal({2, 3, 6}, rng)), kv("kv", random_normal({2, 4, 6}, rng));
                 Tensor w = random_uniform({2, 3, 6}, rng, 0.5, 1.5);
                 auto f = [&](Tape& t) { return sum(mul(mhca(t.param(q), t.param(kv), a), t.constant(w))); };
                 std::vector<Parameter*> ps = a.parameters();
                 ps.push_back(&q);
                 ps.push_back(&kv);
                 return grad_check(f, ps, {}, "mhca");
               }});
  c.push_back({"modab", [] { return detail::check_modab(ArchMode::full, 20); }});
  c.push_back({"modab_ssmix_linear", [] { return detail::check_modab(ArchMode::ssmix_linear, 21); }});
  c.push_back({"modab_crossattn_add", [] { return detail::check_modab(ArchMode::crossattn_add, 22); }});
  c.push_back({"dice_loss", [] { return detail::check_loss([](const Var& y, const Tensor& g) { return dice_loss(y, g); }, 23); }});
  c.push_back({"spectral_consistency", [] {
                 return detail::check_loss([](const Var& y, const Tensor& g) { return spectral_consistency(y, g); }, 24);
               }});
  c.push_back({"entropy_regularizer", [] {
                 return detail::check_loss([](const Var& y, const Tensor&) { return entropy_regularizer(y); }, 25);
               }});
  c.push_back({"bce_loss", [] { return detail::check_loss([](const Var& y, const Tensor& g) { return bce_loss(y, g); }, 26); }});
  c.push_back({"seu_loss", [] {
                 return detail::check_loss([](const Var& y, const Tensor& g) { return seu_loss(y, g).total; }, 27);
               }});
  return c;
}

}  // namespace vlseg
