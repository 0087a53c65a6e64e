#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "test_util.hpp"
#include "vlseg/ops.hpp"

using namespace vlseg;
using vlseg::testing::check_op;
using vlseg::testing::eval;

TEST(Matmul, IdentityCase) {
  Tensor out = eval([](Tape& t) {
    return matmul(t.constant(Tensor::from({2, 2}, {1, 0, 0, 1})), t.constant(Tensor::from({2, 1}, {3, 4})));
  });
  EXPECT_EQ(out, Tensor::from({2, 1}, {3, 4}));
}

TEST(Matmul, HandArithmetic) {
  Tensor out = eval([](Tape& t) {
    return matmul(t.constant(Tensor::from({1, 2}, {1, 2})), t.constant(Tensor::from({2, 1}, {3, 4})));
  });
  EXPECT_EQ(out, Tensor::from({1, 1}, {11}));
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Rng rng(21);
  Tensor a = random_uniform({4, 5}, rng), b = random_uniform({5, 3}, rng);
  Tensor out = eval([&](Tape& t) { return matmul(t.constant(a), t.constant(b)); });
  EXPECT_LT(max_abs_diff(out, vlseg::testing::naive_matmul(a, b)), 1e-12);
}

TEST(Matmul, BatchedAndSharedOperands) {
  Rng rng(22);
  Tensor a = random_uniform({3, 4, 5}, rng), b = random_uniform({5, 2}, rng);
  Tensor out = eval([&](Tape& t) { return matmul(t.constant(a), t.constant(b)); });
  ASSERT_EQ(out.shape(), (Shape{3, 4, 2}));
  for (std::size_t n = 0; n < 3; ++n) {
    Tensor an({4, 5});
    for (std::size_t i = 0; i < 20; ++i) an[i] = a[n * 20 + i];
    Tensor ref = vlseg::testing::naive_matmul(an, b);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(out[n * 8 + i], ref[i], 1e-12);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape t;
  try {
    matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({4, 2})));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("[4, 2]"), std::string::npos);
  }
  EXPECT_THROW(matmul(t.constant(Tensor({2, 2, 3})), t.constant(Tensor({3, 3, 2}))), DimensionError);
}

TEST(Matmul, AdjointIdentity) {
  // <A X, Y> == <X, A^T Y> and <X B, Y> == <X, Y B^T>
  Rng rng(23);
  Tensor a = random_uniform({2, 4, 5}, rng), x = random_uniform({2, 5, 3}, rng), y = random_uniform({2, 4, 3}, rng);
  Tape tape;
  Var av = tape.constant(a), xv = tape.leaf(x);
  Var ax = matmul(av, xv);
  tape.backward(sum(mul(ax, tape.constant(y))));
  EXPECT_NEAR(dot(ax.value(), y), dot(x, tape.grad(xv)), 1e-10);
}

TEST(Matmul, GradCheck) {
  Rng rng(24);
  auto res = check_op([](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); },
                      {random_uniform({2, 3, 4}, rng), random_uniform({2, 4, 2}, rng)});
  EXPECT_LT(res.max_rel_error, 1e-6);
}

TEST(Softmax, SymmetricInput) {
  Tensor out = eval([](Tape& t) { return softmax_lastdim(t.constant(Tensor::from({2}, {0, 0}))); });
  EXPECT_DOUBLE_EQ(out[0], 0.5);
  EXPECT_DOUBLE_EQ(out[1], 0.5);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  Tensor out = eval([](Tape& t) { return softmax_lastdim(t.constant(Tensor::from({2}, {1000, 0}))); });
  EXPECT_TRUE(std::isfinite(out[0]));
  EXPECT_NEAR(out[0], 1.0, 1e-15);
  EXPECT_NEAR(out[1], 0.0, 1e-15);
}

TEST(Softmax, RowsAreDistributions) {
  Rng rng(25);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_normal({3, 4, 7}, rng, 5.0);
    Tensor out = eval([&](Tape& t) { return softmax_lastdim(t.constant(x)); });
    for (std::size_t r = 0; r < 12; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_GE(out[r * 7 + j], 0.0);
        EXPECT_LE(out[r * 7 + j], 1.0);
        s += out[r * 7 + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Softmax, GradCheck) {
  Rng rng(26);
  auto res = check_op([](Tape&, const std::vector<Var>& v) { return softmax_lastdim(v[0]); },
                      {random_normal({3, 5}, rng)});
  EXPECT_LT(res.max_rel_error, 1e-6);
}

TEST(LayerNorm, ConstantSliceMapsToBias) {
  Tensor out = eval([](Tape& t) {
    return layer_norm(t.constant(Tensor({1, 4}, 3.0)), t.constant(Tensor({4}, 2.0)),
                      t.constant(Tensor::from({4}, {0, 0, 0, 0})));
  });
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, StandardizesSlice) {
  Tensor out = eval([](Tape& t) {
    return layer_norm(t.constant(Tensor::from({3}, {1, 2, 3})), t.constant(Tensor({3}, 1.0)),
                      t.constant(Tensor({3}, 0.0)));
  });
  const double m = (out[0] + out[1] + out[2]) / 3.0;
  const double v = (out[0] * out[0] + out[1] * out[1] + out[2] * out[2]) / 3.0 - m * m;
  EXPECT_NEAR(m, 0.0, 1e-12);
  EXPECT_NEAR(v, 1.0, 1e-4);  // eps = 1e-5 inside the sqrt
}

TEST(LayerNorm, GradCheck) {
  Rng rng(27);
  auto res = check_op([](Tape&, const std::vector<Var>& v) { return layer_norm(v[0], v[1], v[2]); },
                      {random_normal({2, 3, 6}, rng), random_uniform({6}, rng, 0.5, 1.5), random_uniform({6}, rng)});
  EXPECT_LT(res.max_rel_error, 1e-6);
}

TEST(LayerNorm, RejectsWrongAffineShape) {
  Tape t;
  EXPECT_THROW(layer_norm(t.constant(Tensor({2, 3})), t.constant(Tensor({2})), t.constant(Tensor({3}))),
               DimensionError);
}

TEST(Activation, AnchorValues) {
  Tensor sp = eval([](Tape& t) { return softplus(t.constant(Tensor::scalar(0.0))); });
  EXPECT_NEAR(sp[0], std::log(2.0), 1e-15);
  EXPECT_NEAR(sp[0], 0.693147, 1e-6);
  Tensor lr = eval([](Tape& t) { return leaky_relu(t.constant(Tensor::scalar(-1.0))); });
  EXPECT_DOUBLE_EQ(lr[0], -0.01);
  Tensor g = eval([](Tape& t) { return gelu(t.constant(Tensor::from({2}, {0.0, 1.0}))); });
  EXPECT_EQ(g[0], 0.0);
  EXPECT_NEAR(g[1], 0.8413447460685429, 1e-15);  // x * Phi(x) at x = 1, erf form
  Tensor big = eval([](Tape& t) { return softplus(t.constant(Tensor::scalar(800.0))); });
  EXPECT_EQ(big[0], 800.0);
}

TEST(Activation, GradChecks) {
  Rng rng(28);
  for (Activation kind : {Activation::gelu, Activation::leaky_relu, Activation::tanh, Activation::softplus,
                          Activation::sigmoid}) {
    Tensor x = random_normal({4, 5}, rng, 2.0);
    nudge_from_kinks(x);
    auto res = check_op([kind](Tape&, const std::vector<Var>& v) { return activation(v[0], kind); }, {x});
    EXPECT_LT(res.max_rel_error, 1e-6) << static_cast<int>(kind);
  }
}

TEST(ShapeOps, PermuteConcatSliceBroadcastGradChecks) {
  Rng rng(29);
  auto r1 = check_op([](Tape&, const std::vector<Var>& v) { return permute(v[0], {2, 0, 1}); },
                     {random_normal({2, 3, 4}, rng)});
  EXPECT_LT(r1.max_rel_error, 1e-9);
  auto r2 = check_op([](Tape&, const std::vector<Var>& v) { return concat({v[0], v[1]}, 1); },
                     {random_normal({2, 3, 4}, rng), random_normal({2, 2, 4}, rng)});
  EXPECT_LT(r2.max_rel_error, 1e-9);
  auto r3 = check_op([](Tape&, const std::vector<Var>& v) { return slice(v[0], 2, 1, 2); },
                     {random_normal({2, 3, 4}, rng)});
  EXPECT_LT(r3.max_rel_error, 1e-9);
  auto r4 = check_op([](Tape&, const std::vector<Var>& v) { return broadcast_to(v[0], {2, 3, 4}); },
                     {random_normal({3, 1}, rng)});
  EXPECT_LT(r4.max_rel_error, 1e-9);
  auto r5 = check_op([](Tape&, const std::vector<Var>& v) { return mean_axis(v[0], 1); },
                     {random_normal({2, 3, 4}, rng)});
  EXPECT_LT(r5.max_rel_error, 1e-9);
  auto r6 = check_op([](Tape&, const std::vector<Var>& v) { return div(v[0], v[1]); },
                     {random_normal({5}, rng), random_uniform({5}, rng, 1.0, 2.0)});
  EXPECT_LT(r6.max_rel_error, 1e-6);
  auto r7 = check_op([](Tape&, const std::vector<Var>& v) { return sum_per_sample(v[0]); },
                     {random_normal({3, 2, 2}, rng)});
  EXPECT_LT(r7.max_rel_error, 1e-9);
}

TEST(ShapeOps, PermuteMatchesIndexing) {
  Rng rng(30);
  Tensor x = random_normal({2, 3, 4}, rng);
  Tensor y = eval([&](Tape& t) { return permute(t.constant(x), {2, 0, 1}); });
  ASSERT_EQ(y.shape(), (Shape{4, 2, 3}));
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.at(c, a, b), x.at(a, b, c));
}

TEST(ShapeOps, ChannelSoftmaxSumsToOne) {
  Rng rng(31);
  Tensor x = random_normal({2, 3, 4, 4}, rng, 3.0);
  Tensor y = eval([&](Tape& t) { return softmax_channels(t.constant(x)); });
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 16; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < 3; ++c) s += y[(b * 3 + c) * 16 + i];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}
