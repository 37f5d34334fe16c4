#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "sfr/objective.hpp"

using namespace sfr;

namespace {

std::vector<Scalar> random_unit(CounterRng& rng, int d) {
  std::vector<Scalar> v(static_cast<std::size_t>(d));
  double n = 0;
  for (auto& x : v) {
    x = static_cast<Scalar>(rng.normal());
    n += double(x) * x;
  }
  for (auto& x : v) x = static_cast<Scalar>(x / std::sqrt(n));
  return v;
}

// heads whose first horizon returns exactly `q` for the zero hidden state
MtpHeads heads_for(const std::vector<double>& q) {
  auto m = MtpHeads::zeros(1, static_cast<int>(q.size()), 1);
  for (std::size_t i = 0; i < q.size(); ++i) m.biases[0][i] = std::log(q[i]);
  return m;
}

}  // namespace

TEST(FlowSample, Endpoints) {
  const std::vector<Scalar> z0 = {0.3f, -1.2f}, z1 = {0.6f, 0.8f};
  EXPECT_EQ(make_flow_sample(z0, z1, 0).z_tau, z0);
  EXPECT_EQ(make_flow_sample(z0, z1, 1).z_tau, z1);
  const auto half = make_flow_sample({0, 0}, z1, 0.5f);
  EXPECT_EQ(half.z_tau, (std::vector<Scalar>{0.3f, 0.4f}));
  EXPECT_EQ(half.u, z1);
}

TEST(FlowSample, InterpolationIdentityOnDraws) {
  CounterRng rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto z1 = random_unit(rng, 8);
    const auto s = sample_flow(z1, rng);
    ASSERT_GE(s.tau, 0);
    ASSERT_LT(s.tau, 1);
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_EQ(s.z_tau[j], (1 - s.tau) * s.z0[j] + s.tau * s.z1[j]);
      // u is one rounded subtraction away from z1 - z0
      EXPECT_NEAR(s.u[j] + s.z0[j], s.z1[j], 2 * std::numeric_limits<Scalar>::epsilon() * (1 + std::abs(s.z0[j])));
    }
  }
}

TEST(FlowSample, ConstantSource) {
  CounterRng rng(2);
  const std::vector<Scalar> z1 = {1, 0};
  const auto s = sample_flow(z1, rng, SourceKind::constant, 0.25f);
  EXPECT_EQ(s.z0, (std::vector<Scalar>{0.25f, 0.25f}));
}

TEST(SfrLoss, ZeroInitExpectationIsDzPlusOneOverDz) {
  const int d = 32, n = 20000;
  FmHead head(FmHeadConfig{.input_dim = 8, .d_z = d});
  CounterRng rng(123);
  std::vector<FlowSample> samples;
  for (int i = 0; i < n; ++i) samples.push_back(sample_flow(random_unit(rng, d), rng));
  Tape tape(false);
  const Tensor h = Tensor::zeros({static_cast<std::size_t>(n), 8});
  const double loss = sfr_loss(tape, samples, h, head).item();
  // per-sample variance of |z1 - z0|^2 / d is (2d + 4) / d^2
  const double sigma = std::sqrt((2.0 * d + 4) / (double(d) * d) / n);
  EXPECT_NEAR(loss, (d + 1.0) / d, 3 * sigma);
}

TEST(SfrLoss, HandCases) {
  Tape tape(false);
  const Tensor u = Tensor::from({1, 2}, {1, 0});
  EXPECT_FLOAT_EQ(ops::mse_rows(tape, Tensor::zeros({1, 2}), u).item(), 0.5f);
  EXPECT_EQ(ops::mse_rows(tape, u, u).item(), 0);
  FmHead head(FmHeadConfig{.input_dim = 2, .d_z = 2});
  EXPECT_THROW(sfr_loss(tape, std::vector<FlowSample>{}, Tensor::zeros({1, 2}), head), DegenerateError);
}

TEST(TotalLoss, WeightedSumAndGradient) {
  Tape tape(false);
  EXPECT_FLOAT_EQ(total_loss(tape, Tensor::scalar(1.0f), Tensor::scalar(0.5f), 0.2f).item(), 1.1f);
  EXPECT_EQ(total_loss(tape, Tensor::scalar(1.25f), Tensor::scalar(7.0f), 0).item(), 1.25f);
  EXPECT_THROW(total_loss(tape, Tensor::scalar(1), Tensor::scalar(1), -0.1f), DomainError);

  // grad_h(total) = grad_h(L_AR) + lambda grad_h(L_SFR), each computed on its own tape
  CounterRng rng(4);
  std::vector<Scalar> hv(6), tv(6), sv(6);
  for (auto* v : {&hv, &tv, &sv})
    for (auto& x : *v) x = static_cast<Scalar>(rng.normal());
  auto grad_of = [&](int which) {
    Tensor h = Tensor::from({2, 3}, hv, true);
    Tensor a = Tensor::from({2, 3}, tv), b = Tensor::from({2, 3}, sv);
    Tape t;
    Tensor lar = ops::mse_rows(t, ops::tanh(t, h), a);
    Tensor lsfr = ops::mse_rows(t, ops::gelu(t, h), b);
    t.backward(which == 0 ? total_loss(t, lar, lsfr, 0.3f) : which == 1 ? lar : lsfr);
    return std::vector<Scalar>(h.grad().begin(), h.grad().end());
  };
  const auto total = grad_of(0), ar = grad_of(1), sfr = grad_of(2);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(total[i], ar[i] + 0.3f * sfr[i], 1e-6);
}

TEST(Regression, BimodalTargetsGiveIrreducibleVariance) {
  Tape tape(false);
  const Tensor z1 = Tensor::from({2, 1}, {-1, 1});
  EXPECT_FLOAT_EQ(mse_regression_loss(tape, Tensor::zeros({2, 1}), z1).item(), 1.0f);
  EXPECT_EQ(mse_regression_loss(tape, z1, z1).item(), 0);
}

TEST(Regression, ConstantSourceFlowEqualsShiftedRegression) {
  // with z0 = c0 the flow target is z1 - c0, so v = f - c0 turns the flow loss
  // into the regression loss of f against z1
  CounterRng rng(9);
  const Scalar c0 = 0.4f;
  std::vector<Scalar> f(4 * 3), z1(4 * 3), v(4 * 3), u(4 * 3);
  for (std::size_t i = 0; i < f.size(); ++i) {
    f[i] = static_cast<Scalar>(rng.normal());
    z1[i] = static_cast<Scalar>(rng.normal());
    v[i] = f[i] - c0;
  }
  for (std::size_t r = 0; r < 4; ++r) {
    CounterRng draw(r);
    const auto s = sample_flow(std::span<const Scalar>(z1.data() + r * 3, 3), draw, SourceKind::constant, c0);
    std::copy(s.u.begin(), s.u.end(), u.begin() + r * 3);
  }
  Tape tape(false);
  const double flow = ops::mse_rows(tape, Tensor::from({4, 3}, v), Tensor::from({4, 3}, u)).item();
  const double reg = mse_regression_loss(tape, Tensor::from({4, 3}, f), Tensor::from({4, 3}, z1)).item();
  EXPECT_NEAR(flow, reg, 1e-6);
}

TEST(CosineLoss, AlignedIsZeroOppositeIsTwo) {
  Tape tape(false);
  const Tensor t = Tensor::from({1, 2}, {0.6f, 0.8f});
  EXPECT_NEAR(cosine_loss(tape, Tensor::from({1, 2}, {6, 8}), t).item(), 0.0, 1e-5);
  EXPECT_NEAR(cosine_loss(tape, Tensor::from({1, 2}, {-6, -8}), t).item(), 2.0, 1e-5);
  EXPECT_NEAR(cosine_loss(tape, Tensor::zeros({1, 2}), t).item(), 1.0, 1e-6);
}

TEST(Mtp, ClosedFormExample) {
  const auto heads = heads_for({0.2, 0.5, 0.3});
  const MtpBatch batch{{{0.0}}, {0, 1}};
  const double alpha[] = {1.0};
  EXPECT_NEAR(mtp_loss(batch, heads, alpha), 0.6931, 1e-4);
  EXPECT_NEAR(sfr_bregman_loss(batch, heads, alpha), -std::log(0.5), 1e-12);
}

TEST(Mtp, OneHotPredictionIsFree) {
  auto heads = MtpHeads::zeros(1, 3, 1);
  heads.biases[0] = {-700, 0, -700};
  const MtpBatch batch{{{0.0}}, {2, 1}};
  const double alpha[] = {1.0};
  EXPECT_NEAR(mtp_loss(batch, heads, alpha), 0.0, 1e-12);
  EXPECT_NEAR(brier_endpoint_loss(batch, heads, alpha), 0.0, 1e-12);
  EXPECT_NEAR(simplex::bregman_neg_entropy(std::vector<double>{0, 1, 0}, std::vector<double>{1e-9, 1 - 2e-9, 1e-9}), 0,
              1e-8);
}

TEST(Mtp, HorizonsAddUp) {
  auto heads = MtpHeads::zeros(2, 4, 2);
  CounterRng rng(6);
  for (auto& w : heads.weights)
    for (auto& x : w) x = rng.normal();
  const MtpBatch batch{{{0.5, -0.2}, {1.0, 0.3}, {-0.4, 0.9}}, {0, 3, 1, 2}};
  const double both[] = {0.7, 0.3};
  const double first[] = {0.7, 0.0}, second[] = {0.0, 0.3};
  EXPECT_NEAR(mtp_loss(batch, heads, both), mtp_loss(batch, heads, first) + mtp_loss(batch, heads, second), 1e-12);
}

TEST(Mtp, BrierUniformBinary) {
  const auto heads = MtpHeads::zeros(1, 2, 1);
  const MtpBatch batch{{{0.0}}, {1, 0}};
  const double alpha[] = {1.0};
  EXPECT_DOUBLE_EQ(brier_endpoint_loss(batch, heads, alpha), 0.5);
  EXPECT_DOUBLE_EQ(sfr_euclidean_loss(batch, heads, alpha), 0.5);
}

TEST(Mtp, VelocityAndEndpointBrierAgree) {
  CounterRng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    auto heads = MtpHeads::zeros(3, 7, 3);
    for (auto& w : heads.weights)
      for (auto& x : w) x = rng.normal();
    double z = 0;
    for (auto& p : heads.reference) z += (p = 0.1 + rng.uniform());
    for (auto& p : heads.reference) p /= z;
    MtpBatch batch;
    for (int t = 0; t < 5; ++t) batch.hidden.push_back({rng.normal(), rng.normal(), rng.normal()});
    for (int t = 0; t < 7; ++t) batch.tokens.push_back(static_cast<int>(rng.below(7)));
    const double alphas[] = {1.0, 0.5, 0.25};
    EXPECT_NEAR(sfr_euclidean_loss(batch, heads, alphas), brier_endpoint_loss(batch, heads, alphas), 1e-12);
  }
}

TEST(Mtp, ZeroHorizonsIsArLoss) {
  const auto heads = MtpHeads::zeros(0, 3, 1);
  EXPECT_EQ(mtp_family_loss(1.2345, MtpBatch{{{0.0}}, {0, 1}}, heads, {}, 0.7), 1.2345);
}

TEST(Simplex, TangentGradientsVanishAtTruth) {
  const std::vector<double> p = {0.1, 0.6, 0.3};
  for (double g : simplex::expected_log_loss_tangent_grad(p, p)) EXPECT_NEAR(g, 0, 1e-12);
  for (double g : simplex::expected_brier_loss_tangent_grad(p, p)) EXPECT_NEAR(g, 0, 1e-12);
}

TEST(Geometry, ParseRoundTrip) {
  for (auto g : {GeometryKind::euclidean, GeometryKind::bregman_kl, GeometryKind::cosine, GeometryKind::mse_regression})
    EXPECT_EQ(parse_geometry(to_string(g)), g);
  EXPECT_EQ(parse_source("constant"), SourceKind::constant);
  EXPECT_THROW(parse_geometry("l1"), ConfigError);
}
