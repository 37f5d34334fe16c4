#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>

#include "sfr/model.hpp"
#include "sfr/rng.hpp"

using namespace sfr;

namespace {

BackboneConfig small_cfg() { return {.layers = 2, .hidden = 16, .heads = 2, .vocab = 12, .max_seq = 10, .seed = 5}; }

}  // namespace

TEST(Backbone, ParameterCountMatchesArithmetic) {
  for (auto cfg : {small_cfg(), BackboneConfig{}}) {
    LanguageModel m(cfg);
    EXPECT_EQ(m.parameters().numel(), cfg.parameter_count());
  }
  FmHeadConfig fc{.input_dim = 64, .d_z = 32, .depth = 4};
  EXPECT_EQ(FmHead(fc).parameters().numel(), fc.parameter_count());
}

TEST(Backbone, RejectsBadConfigs) {
  auto cfg = small_cfg();
  cfg.heads = 3;
  EXPECT_THROW(Backbone{cfg}, ConfigError);
  Backbone b(small_cfg());
  Tape tape(false);
  EXPECT_THROW(b.forward(tape, std::vector<int>(11, 0)), DimensionError);
}

TEST(Backbone, CausalUnderPerturbation) {
  Backbone b(small_cfg());
  std::vector<int> tokens = {3, 1, 4, 1, 5, 9, 2, 6};
  Tape tape(false);
  const Tensor base = b.forward(tape, tokens);
  const std::size_t d = 16;
  for (std::size_t j = 1; j < tokens.size(); ++j) {
    auto changed = tokens;
    changed[j] = (changed[j] + 5) % 12;
    const Tensor h = b.forward(tape, changed);
    for (std::size_t t = 0; t < j; ++t)
      for (std::size_t c = 0; c < d; ++c) ASSERT_EQ(h.at(t, c), base.at(t, c)) << "j=" << j << " t=" << t;
    double moved = 0;
    for (std::size_t c = 0; c < d; ++c) moved += std::abs(h.at(j, c) - base.at(j, c));
    EXPECT_GT(moved, 0);
  }
}

TEST(Backbone, BatchRowsMatchSingleSequences) {
  Backbone b(small_cfg());
  const std::vector<int> a = {1, 2, 3, 4}, c = {7, 7, 0, 11};
  std::vector<int> both = a;
  both.insert(both.end(), c.begin(), c.end());
  Tape tape(false);
  const Tensor hb = b.forward(tape, both, 2);
  const Tensor ha = b.forward(tape, a), hc = b.forward(tape, c);
  EXPECT_EQ(std::memcmp(hb.values().data(), ha.values().data(), ha.numel() * sizeof(Scalar)), 0);
  EXPECT_EQ(std::memcmp(hb.values().data() + ha.numel(), hc.values().data(), hc.numel() * sizeof(Scalar)), 0);
}

TEST(Backbone, SameSeedSameOutputs) {
  Backbone a(small_cfg()), b(small_cfg());
  const std::vector<int> tokens = {0, 1, 2, 3};
  Tape tape(false);
  const Tensor x = a.forward(tape, tokens), y = b.forward(tape, tokens);
  EXPECT_EQ(std::memcmp(x.values().data(), y.values().data(), x.numel() * sizeof(Scalar)), 0);
}

TEST(FmHead, FreshHeadOutputsExactZero) {
  FmHead head(FmHeadConfig{.input_dim = 16, .d_z = 8});
  CounterRng rng(3);
  for (int i = 0; i < 20; ++i) {
    std::vector<Scalar> z(8), h(16);
    for (auto& x : z) x = static_cast<Scalar>(10 * rng.normal());
    for (auto& x : h) x = static_cast<Scalar>(10 * rng.normal());
    for (auto v : head.forward(z, static_cast<Scalar>(rng.uniform()), h)) EXPECT_EQ(v, 0);
  }
}

TEST(FmHead, RejectsTauOutsideUnitInterval) {
  FmHead head(FmHeadConfig{.input_dim = 4, .d_z = 2});
  const std::vector<Scalar> z(2, 0), h(4, 0);
  EXPECT_THROW(head.forward(z, -0.01f, h), DomainError);
  EXPECT_THROW(head.forward(z, 1.01f, h), DomainError);
  EXPECT_NO_THROW(head.forward(z, 1.0f, h));
  EXPECT_THROW(FmHead(FmHeadConfig{.depth = 1}), ConfigError);
}

TEST(FmHead, BecomesConditionAndTimeSensitiveAfterTraining) {
  FmHeadConfig cfg{.input_dim = 4, .d_z = 2, .width = 8, .depth = 3, .time_dim = 4, .seed = 1};
  FmHead head(cfg);
  const Tensor h = Tensor::from({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
  const Tensor z = Tensor::from({2, 2}, {0, 0, 0, 0});
  const Tensor u = Tensor::from({2, 2}, {1, -1, -1, 1});
  const std::vector<Scalar> taus = {0.3f, 0.3f};
  for (int step = 0; step < 10; ++step) {
    head.parameters().zero_grad();
    Tape tape;
    tape.backward(ops::mse_rows(tape, head.forward(tape, z, taus, h), u));
    for (auto& [name, p] : head.parameters().entries()) {
      auto v = p.mutable_values();
      auto g = p.grad();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.5f * g[i];
    }
  }
  const std::vector<Scalar> z0 = {0, 0};
  const std::vector<Scalar> ha = {1, 0, 0, 0}, hb = {0, 1, 0, 0};
  EXPECT_NE(head.forward(z0, 0.3f, ha), head.forward(z0, 0.3f, hb));
  EXPECT_NE(head.forward(z0, 0.0f, ha), head.forward(z0, 1.0f, ha));
}

TEST(TimeEmbedding, SinusoidalPairs) {
  const auto e = time_embedding(0.5f, 4);
  EXPECT_NEAR(e[0], 1.0, 1e-6);  // sin(pi/2)
  EXPECT_NEAR(e[1], 0.0, 1e-6);
  EXPECT_NEAR(e[2], 0.0, 1e-6);  // sin(pi)
  EXPECT_NEAR(e[3], -1.0, 1e-6);
}

TEST(MtpHeads, ZeroHeadsAreUniform) {
  const auto m = MtpHeads::zeros(2, 5, 3);
  const std::vector<double> h = {0.3, -1, 2};
  for (double q : m.forward(h, 2)) EXPECT_DOUBLE_EQ(q, 0.2);
  EXPECT_THROW(m.forward(h, 3), DomainError);
  EXPECT_THROW(m.forward(h, 0), DomainError);
}

TEST(MtpHeads, OutputsOnSimplexWithTangentVelocity) {
  auto m = MtpHeads::zeros(1, 6, 4);
  CounterRng rng(17);
  for (auto& w : m.weights[0]) w = 2 * rng.normal();
  for (auto& b : m.biases[0]) b = rng.normal();
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> h(4);
    for (auto& x : h) x = rng.normal();
    const auto q = m.forward(h, 1);
    double sum = 0, vel = 0;
    for (std::size_t i = 0; i < q.size(); ++i) {
      EXPECT_GE(q[i], 0);
      sum += q[i];
      vel += q[i] - m.reference[i];
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
    EXPECT_NEAR(vel, 0.0, 1e-6);
  }
}

TEST(MtpHeads, ReferenceMustBeInterior) {
  auto m = MtpHeads::zeros(1, 3, 1);
  m.reference = {0.5, 0.5, 0.0};
  EXPECT_THROW(m.validate(), DomainError);
}
