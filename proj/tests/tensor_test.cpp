#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "sfr/ops.hpp"
#include "sfr/rng.hpp"

using namespace sfr;

namespace {

Tensor random_matrix(std::size_t m, std::size_t n, std::uint64_t seed, bool grad = false) {
  CounterRng rng(seed);
  std::vector<Scalar> v(m * n);
  for (auto& x : v) x = static_cast<Scalar>(rng.normal());
  return Tensor::from({m, n}, v, grad);
}

}  // namespace

TEST(Tensor, RejectsMismatchedValueCount) {
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor::zeros({0, 3}), DimensionError);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape tape(false);
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor out = ops::matmul(tape, eye, a);
  EXPECT_EQ(out.shape(), a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(out.at(i), a.at(i));
}

TEST(Matmul, HandArithmetic) {
  Tape tape(false);
  Tensor out = ops::matmul(tape, Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 1}, {1, 1}));
  ASSERT_EQ(out.shape(), (Shape{2, 1}));
  EXPECT_EQ(out.at(0), 3);
  EXPECT_EQ(out.at(1), 7);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape tape(false);
  try {
    ops::matmul(tape, Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] x [2x3]"), std::string::npos) << e.what();
  }
}

TEST(Matmul, GradientOfSumIsRowSumsOfB) {
  Tensor a = random_matrix(3, 4, 1, true);
  Tensor b = random_matrix(4, 2, 2, false);
  Tape tape;
  Tensor loss = ops::sum(tape, ops::matmul(tape, a, b));
  tape.backward(loss);
  // d sum(AB) / dA_ij = sum_n B_jn
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(a.grad()[i * 4 + j], b.at(j, 0) + b.at(j, 1), 1e-6);
}

TEST(Softmax, ZeroRowIsUniform) {
  Tape tape(false);
  Tensor p = ops::softmax_rows(tape, Tensor::zeros({1, 4}));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_FLOAT_EQ(p.at(j), 0.25f);
}

TEST(Softmax, LogThreeRow) {
  Tape tape(false);
  Tensor p = ops::softmax_rows(tape, Tensor::from({1, 2}, {0, static_cast<Scalar>(std::log(3.0))}));
  EXPECT_NEAR(p.at(0), 0.25, 1e-6);
  EXPECT_NEAR(p.at(1), 0.75, 1e-6);
}

TEST(Softmax, ShiftInvariantAndNormalized) {
  Tape tape(false);
  Tensor x = random_matrix(5, 7, 3);
  Tensor shifted = x.clone();
  for (auto& v : shifted.mutable_values()) v += 3.5f;
  Tensor p = ops::softmax_rows(tape, x), q = ops::softmax_rows(tape, shifted);
  for (std::size_t i = 0; i < 5; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      EXPECT_NEAR(p.at(i, j), q.at(i, j), 1e-6);
      EXPECT_GE(p.at(i, j), 0);
      row += p.at(i, j);
    }
    EXPECT_NEAR(row, 1.0, 1e-6);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  Tape tape(false);
  const int targets[] = {2};
  const int mask[] = {1};
  EXPECT_NEAR(ops::cross_entropy(tape, Tensor::zeros({1, 4}), targets, mask).item(), std::log(4.0), 1e-6);
}

TEST(CrossEntropy, ConfidentPredictionNearZero) {
  Tape tape(false);
  const int targets[] = {1};
  const int mask[] = {1};
  Tensor logits = Tensor::from({1, 3}, {-30, 30, -30});
  EXPECT_LT(ops::cross_entropy(tape, logits, targets, mask).item(), 1e-6);
}

TEST(CrossEntropy, MatchesBruteForceLogSoftmax) {
  Tape tape(false);
  Tensor logits = random_matrix(3, 5, 4);
  const int targets[] = {4, 0, 2};
  const int mask[] = {1, 0, 1};
  double expected = 0;
  for (int i : {0, 2}) {
    double z = 0;
    for (std::size_t j = 0; j < 5; ++j) z += std::exp(double(logits.at(i, j)));
    expected += -(double(logits.at(i, targets[i])) - std::log(z));
  }
  expected /= 2;
  EXPECT_NEAR(ops::cross_entropy(tape, logits, targets, mask).item(), expected, 1e-5);
}

TEST(CrossEntropy, EmptyMaskIsDegenerate) {
  Tape tape(false);
  const int targets[] = {0, 1};
  const int mask[] = {0, 0};
  EXPECT_THROW(ops::cross_entropy(tape, Tensor::zeros({2, 3}), targets, mask), DegenerateError);
}

TEST(Backward, SquareAtThree) {
  Tensor x = Tensor::scalar(3, true);
  Tape tape;
  tape.backward(ops::mul(tape, x, x));
  EXPECT_EQ(x.grad()[0], 6);
}

TEST(Backward, SecondPassOnSameTapeIsRejected) {
  Tensor x = Tensor::scalar(2, true);
  Tape tape;
  Tensor y = ops::mul(tape, x, x);
  tape.backward(y);
  EXPECT_THROW(tape.backward(y), StateError);
}

TEST(Backward, RootMustComeFromTape) {
  Tensor x = Tensor::scalar(2, true);
  Tape tape;
  EXPECT_THROW(tape.backward(x), StateError);
}

TEST(Backward, AccumulatesUntilZeroed) {
  Tensor x = Tensor::scalar(3, true);
  for (int pass = 0; pass < 2; ++pass) {
    Tape tape;
    tape.backward(ops::mul(tape, x, x));
  }
  EXPECT_EQ(x.grad()[0], 12);
  x.zero_grad();
  EXPECT_EQ(x.grad()[0], 0);
}

TEST(Detach, ValuesBitwiseEqualAndGradientBlocked) {
  Tensor w = random_matrix(3, 3, 5, true);
  Tensor x = random_matrix(2, 3, 6);
  Tape tape;
  Tensor h = ops::matmul(tape, x, w);
  Tensor d = detach(h);
  ASSERT_EQ(std::memcmp(d.values().data(), h.values().data(), h.numel() * sizeof(Scalar)), 0);
  EXPECT_FALSE(d.requires_grad());
  Tensor v = random_matrix(3, 3, 7, true);
  Tensor loss = ops::sum(tape, ops::matmul(tape, d, v));
  tape.backward(loss);
  for (auto g : w.grad()) EXPECT_EQ(g, 0);
  double vg = 0;
  for (auto g : v.grad()) vg += std::abs(g);
  EXPECT_GT(vg, 0);
}

TEST(Detach, MixedGraphOnlyFlowsThroughLiveBranch) {
  // loss = sum(h*h) + sum(detach(h)*c): gradient w.r.t. h must be 2h only.
  Tensor h = random_matrix(2, 2, 8, true);
  Tensor c = random_matrix(2, 2, 9);
  Tape tape;
  Tensor live = ops::sum(tape, ops::mul(tape, h, h));
  Tensor dead = ops::sum(tape, ops::mul(tape, detach(h), c));
  tape.backward(ops::add(tape, live, dead));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(h.grad()[i], 2 * h.at(i), 1e-6);
}

TEST(Forward, BitwiseDeterministic) {
  Tensor x = random_matrix(8, 16, 10);
  Tensor w = random_matrix(16, 48, 11);
  auto run = [&] {
    Tape tape(false);
    Tensor qkv = ops::matmul(tape, x, w);
    return ops::causal_attention(tape, qkv, 2, 4, 4);
  };
  Tensor a = run(), b = run();
  EXPECT_EQ(std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(Scalar)), 0);
}

TEST(Attention, CausalPrefixIndependentOfFuture) {
  Tensor qkv = random_matrix(5, 12, 12);
  Tensor changed = qkv.clone();
  for (std::size_t c = 0; c < 12; ++c) changed.mutable_values()[4 * 12 + c] += 1.0f;
  Tape tape(false);
  Tensor a = ops::causal_attention(tape, qkv, 1, 5, 2);
  Tensor b = ops::causal_attention(tape, changed, 1, 5, 2);
  for (std::size_t i = 0; i < 4 * 4; ++i) EXPECT_EQ(a.at(i), b.at(i));
}
