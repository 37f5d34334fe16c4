#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sfr/checkpoint.hpp"
#include "sfr/trainer.hpp"

using namespace sfr;

namespace {

RunConfig small_config(const std::string& method, int steps, const std::string& extra = "") {
  return parse_config("method = " + method + "\nsteps = " + std::to_string(steps) +
                      "\nbatch_size = 4\nmodel.layers = 1\nmodel.hidden = 32\nhorizon_k = 6\nencoder.d_z = 16\n"
                      "task.queries = 4\nwarmup_steps = 3\nramp_steps = 4\n" +
                      extra);
}

bool bitwise_equal(const ParameterSet& a, const ParameterSet& b) {
  const auto sa = a.snapshot(), sb = b.snapshot();
  if (sa.size() != sb.size()) return false;
  for (std::size_t i = 0; i < sa.size(); ++i)
    if (sa[i].size() != sb[i].size() || std::memcmp(sa[i].data(), sb[i].data(), sa[i].size() * sizeof(Scalar)) != 0)
      return false;
  return true;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("sfr_trainer_test_" + name)).string();
}

}  // namespace

TEST(Schedule, LambdaRamp) {
  Schedule s;
  s.lambda0 = 0.2;
  s.warmup_steps = 200;
  s.ramp_steps = 300;
  EXPECT_DOUBLE_EQ(lambda_at(1, s), 0.2);  // phase A trains the head alone at lambda0
  EXPECT_DOUBLE_EQ(lambda_at(200, s), 0.2);  // step T_h is the last phase-A step
  EXPECT_NEAR(lambda_at(201, s), 0.2 / 300, 1e-15);
  EXPECT_NEAR(lambda_at(350, s), 0.1, 1e-15);
  EXPECT_DOUBLE_EQ(lambda_at(500, s), 0.2);
  EXPECT_DOUBLE_EQ(lambda_at(5000, s), 0.2);
  EXPECT_THROW(lambda_at(0, s), DomainError);
}

TEST(Schedule, CosineLr) {
  Schedule s;
  s.max_steps = 100;
  EXPECT_DOUBLE_EQ(lr_scale_at(37, s), 1.0);
  s.lr_schedule = "cosine";
  EXPECT_DOUBLE_EQ(lr_scale_at(1, s), 1.0);
  EXPECT_NEAR(lr_scale_at(51, s), 0.5, 1e-12);
}

TEST(Gating, UpdatesRunningMeanBeforeComparing) {
  GatingState st;
  EXPECT_FALSE(gate_decision(3.0, st, 2.0, 0.5));  // seeds L-bar = 3
  EXPECT_DOUBLE_EQ(st.running, 3.0);
  // L-bar becomes 2, threshold 1: loss 1 is not strictly below
  EXPECT_FALSE(gate_decision(1.0, st, 2.0, 0.5));
  EXPECT_DOUBLE_EQ(st.running, 2.0);
  // L-bar 1.1, threshold 0.55
  EXPECT_TRUE(gate_decision(0.2, st, 2.0, 0.5));
  EXPECT_NEAR(st.running, 1.1, 1e-15);
}

TEST(Gating, SpecWorkedSequence) {
  // losses 1.0, 1.0, 0.5 at gamma 1.2, mu 0.9: only the drop gates
  GatingState st;
  EXPECT_FALSE(gate_decision(1.0, st, 1.2, 0.9));
  EXPECT_FALSE(gate_decision(1.0, st, 1.2, 0.9));
  EXPECT_TRUE(gate_decision(0.5, st, 1.2, 0.9));
  EXPECT_NEAR(st.running, 0.95, 1e-15);
}

TEST(Gating, RankSyncIsOrAgainstBruteForce) {
  for (int mask = 0; mask < 256; ++mask) {
    std::vector<bool> flags(8);
    bool any = false;
    for (int r = 0; r < 8; ++r) {
      flags[static_cast<std::size_t>(r)] = (mask >> r) & 1;
      any = any || flags[static_cast<std::size_t>(r)];
    }
    EXPECT_EQ(simulate_rank_sync(flags), any) << mask;
  }
  EXPECT_THROW(simulate_rank_sync({}), DomainError);
}

TEST(Ema, UpdateRuleAndPhaseGuard) {
  ParameterSet live;
  live.add("w", Tensor::from({2}, {1.0f, -2.0f}));
  std::vector<std::vector<Scalar>> ema = {{0.0f, 0.0f}};
  ema_update(ema, live, 0.9, 11, 10);
  EXPECT_FLOAT_EQ(ema[0][0], 0.1f);
  EXPECT_FLOAT_EQ(ema[0][1], -0.2f);
  EXPECT_THROW(ema_update(ema, live, 0.9, 10, 10), StateError);
  std::vector<std::vector<Scalar>> bad = {{0.0f}};
  EXPECT_THROW(ema_update(bad, live, 0.9, 11, 10), DimensionError);
}

TEST(Optimizer, FirstAdamStepMovesByLr) {
  Schedule s;
  ParameterSet p;
  Tensor w = p.add("w", Tensor::from({3}, {0.0f, 1.0f, 2.0f}));
  Optimizer opt(p, s, 0.01);
  auto g = w.grad();
  g[0] = 5.0f;
  g[1] = -0.001f;
  g[2] = 0.0f;
  opt.step(p, 1.0);
  EXPECT_NEAR(w.values()[0], -0.01f, 1e-6);
  EXPECT_NEAR(w.values()[1], 1.01f, 1e-5);
  EXPECT_EQ(w.values()[2], 2.0f);
}

TEST(Batch, LayoutMatchesExamples) {
  auto cfg = small_config("sft", 1);
  Trainer tr(cfg);
  const auto ids = tr.batch_indices(1);
  const auto b = make_batch(tr.dataset(), ids);
  ASSERT_EQ(b.inputs.size(), ids.size() * b.seq_len);
  const auto& ex = tr.dataset().examples[static_cast<std::size_t>(ids[1])];
  const auto seq = ex.sequence();
  EXPECT_EQ(b.inputs[b.seq_len + 0], seq[0]);
  EXPECT_EQ(b.targets[b.seq_len + b.prompt_len - 1], ex.response[0]);
  EXPECT_EQ(b.mask[b.seq_len + b.prompt_len - 1], 1);
  EXPECT_EQ(b.mask[b.seq_len + 0], 0);
  // the row that has consumed response[t] predicts response[t + 1]
  EXPECT_EQ(b.targets[response_row(b, 1, 5)], ex.response[6]);
}

TEST(Trainer, PhaseAFreezesBackboneAndTrainsHead) {
  auto cfg = small_config("sfr", 6, "");
  cfg.schedule.warmup_steps = 6;
  Trainer tr(cfg);
  const Trainer fresh(cfg);
  const auto head_before = tr.phi().snapshot();
  for (int i = 0; i < 6; ++i) {
    const auto m = tr.step();
    EXPECT_EQ(m.theta_grad_norm, 0.0);
    EXPECT_GT(m.phi_grad_norm, 0.0);
  }
  EXPECT_TRUE(bitwise_equal(tr.theta(), fresh.theta()));
  EXPECT_NE(tr.phi().snapshot(), head_before);
}

TEST(Trainer, InitialFlowLossNearZeroInitValue) {
  auto cfg = small_config("sfr", 1);
  Trainer tr(cfg);
  const auto m = tr.step();
  const double expected = (cfg.d_z + 1.0) / cfg.d_z;
  EXPECT_NEAR(m.l_sfr, expected, 0.25);
}

TEST(Trainer, ForcedGatingMatchesSftBitwise) {
  auto sfr_cfg = small_config("sfr", 8, "gating = forced\n");
  sfr_cfg.schedule.warmup_steps = 0;
  auto sft_cfg = small_config("sft", 8);
  Trainer a(sfr_cfg), b(sft_cfg);
  for (int i = 0; i < 8; ++i) {
    const auto ma = a.step();
    const auto mb = b.step();
    EXPECT_TRUE(ma.gated);
    EXPECT_EQ(ma.l_ar, mb.l_ar) << i;
  }
  EXPECT_TRUE(bitwise_equal(a.theta(), b.theta()));
}

TEST(Trainer, ZeroLambdaMatchesSftAfterPhaseA) {
  auto sfr_cfg = small_config("sfr", 6, "lambda0 = 0\ngating = off\n");
  sfr_cfg.schedule.warmup_steps = 0;
  Trainer a(sfr_cfg), b(small_config("sft", 6));
  a.run();
  b.run();
  EXPECT_TRUE(bitwise_equal(a.theta(), b.theta()));
}

TEST(Trainer, MetricsAreDeterministic) {
  auto cfg = small_config("sfr", 6);
  std::ostringstream a, b;
  Trainer(cfg).run(&a);
  Trainer(cfg).run(&b);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_FALSE(a.str().empty());
}

TEST(Trainer, VirtualRanksAndAllPositionsRun) {
  auto cfg = small_config("sfr", 4, "virtual_ranks = 4\nsfr_mean = all\nstride = 2\n");
  Trainer tr(cfg);
  for (const auto& m : tr.run()) EXPECT_TRUE(std::isfinite(m.l_sfr));
}

TEST(Trainer, SimplexAndRegressionGeometriesRun) {
  for (const char* extra : {"target_space = simplex\ngeometry = bregman_kl\n",
                            "target_space = simplex\ngeometry = euclidean\n", "geometry = mse_regression\n",
                            "geometry = cosine\n"}) {
    Trainer tr(small_config("sfr", 4, extra));
    for (const auto& m : tr.run()) EXPECT_TRUE(std::isfinite(m.l_sfr)) << extra;
  }
}

TEST(Checkpoint, ResumeReproducesTenStepsBitwise) {
  auto cfg = small_config("sfr", 16);
  Trainer straight(cfg);
  std::vector<StepMetrics> expected;
  for (int i = 0; i < 16; ++i) {
    auto m = straight.step();
    if (i >= 6) expected.push_back(m);
  }
  Trainer first(cfg);
  for (int i = 0; i < 6; ++i) first.step();
  const auto path = temp_path("resume.ckpt");
  first.save(path, false);
  Trainer resumed = Trainer::resume(path);
  EXPECT_EQ(resumed.steps_done(), 6);
  std::vector<StepMetrics> got;
  for (int i = 0; i < 10; ++i) got.push_back(resumed.step());
  EXPECT_EQ(got, expected);
  EXPECT_TRUE(bitwise_equal(resumed.theta(), straight.theta()));
  EXPECT_TRUE(bitwise_equal(resumed.phi(), straight.phi()));
  std::filesystem::remove(path);
}

TEST(Checkpoint, PublishedHoldsNoHeadAndReloadsBitwise) {
  auto cfg = small_config("sfr", 4);
  Trainer tr(cfg);
  tr.run();
  const auto path = temp_path("published.ckpt");
  tr.save(path, true);
  const auto data = read_checkpoint(path);
  EXPECT_FALSE(data.manifest.has_prefix("fm_head"));
  EXPECT_FALSE(data.manifest.has_prefix("adam"));
  EXPECT_FALSE(data.manifest.has_prefix("encoder"));
  RunConfig loaded_cfg;
  LanguageModel loaded = load_language_model(path, &loaded_cfg);
  EXPECT_EQ(loaded_cfg.to_text(), cfg.to_text());
  const auto& ex = tr.dataset().examples[0];
  const auto tokens = ex.sequence();
  const Tokens input(tokens.begin(), tokens.end() - 1);
  Tape t1(false), t2(false);
  const Tensor ta = tr.model().logits(t1, input, 1);
  const auto a = ta.values();
  const Tensor tb = loaded.logits(t2, input, 1);
  const auto b = tb.values();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(Scalar)), 0);
  EXPECT_THROW(Trainer::resume(path), StateError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, SftResumeWorks) {
  auto cfg = small_config("sft", 5);
  Trainer a(cfg);
  a.step();
  a.step();
  const auto path = temp_path("sft.ckpt");
  a.save(path, false);
  Trainer b = Trainer::resume(path);
  a.run();
  b.run();
  EXPECT_TRUE(bitwise_equal(a.theta(), b.theta()));
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const auto path = temp_path("bad.ckpt");
  {
    std::ofstream os(path);
    os << "not a checkpoint\n";
  }
  EXPECT_THROW(read_checkpoint(path), IoError);
  EXPECT_THROW(read_checkpoint(temp_path("missing.ckpt")), IoError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, FailedWriteLeavesNoPartialFile) {
  const std::string path = "/nonexistent_dir_sfr/x.ckpt";
  EXPECT_THROW(write_checkpoint(path, {}, {}), IoError);
  EXPECT_FALSE(std::filesystem::exists(path + ".partial"));
}

TEST(Config, MissingAndUnknownKeys) {
  try {
    parse_config("steps = 3\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("method"), std::string::npos);
  }
  EXPECT_THROW(parse_config("method = sfr\nsteps = 3\nbogus = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("method = sfr\nsteps = 3\nsteps = 4\n"), ConfigError);
  EXPECT_THROW(parse_config("method = sfr\nsteps = x\n"), ConfigError);
  EXPECT_THROW(parse_config("method = sfr\nsteps = 3\ngate_gamma = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("method = sfr\nsteps = 3\ngeometry = bregman_kl\n"), ConfigError);
}

TEST(Config, TextRoundTrip) {
  auto cfg = small_config("sfr", 9, "lambda0 = 0.35\nema_mode = shadow\n");
  const auto again = parse_config(cfg.to_text());
  EXPECT_EQ(again.to_text(), cfg.to_text());
  EXPECT_EQ(again.schedule.lambda0, 0.35);
  EXPECT_EQ(again.schedule.ema_mode, EmaMode::shadow);
}
