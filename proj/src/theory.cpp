#include "sfr/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "sfr/diagnostics.hpp"
#include "sfr/trainer.hpp"

SFR_BEGIN_NAMESPACE

namespace {

constexpr int kConditionDim = 4;

double dist(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

std::vector<Scalar> condition_vector(const MixtureSpec& m) {
  std::vector<Scalar> c(kConditionDim);
  for (int i = 0; i < kConditionDim; ++i) c[static_cast<std::size_t>(i)] = static_cast<Scalar>(std::cos(1.0 + i + m.condition));
  return c;
}

Tensor repeat_rows(std::span<const Scalar> row, std::size_t n) {
  std::vector<Scalar> out;
  out.reserve(n * row.size());
  for (std::size_t i = 0; i < n; ++i) out.insert(out.end(), row.begin(), row.end());
  return Tensor::from({n, row.size()}, std::move(out));
}

FmHead make_head(const MixtureSpec& m, const TheoryTrainConfig& cfg) {
  FmHeadConfig hc;
  hc.input_dim = kConditionDim;
  hc.d_z = m.dim;
  hc.width = cfg.width;
  hc.depth = cfg.depth;
  hc.time_dim = cfg.time_dim;
  hc.seed = cfg.seed;
  return FmHead(hc);
}

Schedule adam_schedule(const TheoryTrainConfig& cfg) {
  Schedule s;
  s.lr = cfg.lr;
  s.max_steps = cfg.steps;
  return s;
}

// linear decay to a tenth of the base rate
double decay_scale(int n, int steps) { return 1.0 - 0.9 * double(n) / double(std::max(steps, 1)); }

std::vector<Scalar> flatten(const Points& p) {
  std::vector<Scalar> out;
  for (const auto& r : p)
    for (double x : r) out.push_back(static_cast<Scalar>(x));
  return out;
}

Points integrate_from(const FmHead& head, std::span<const Scalar> c, Points z0, int steps) {
  const std::size_t n = z0.size(), d = z0.at(0).size();
  std::vector<Scalar> z = flatten(z0);
  const Tensor hb = repeat_rows(c, n);
  const auto dt = static_cast<Scalar>(1.0 / steps);
  for (int s = 0; s < steps; ++s) {
    Tape tape(false);
    const std::vector<Scalar> taus(n, static_cast<Scalar>(double(s) / steps));
    const Tensor v = head.forward(tape, Tensor::from({n, d}, z), taus, hb);
    const auto vv = v.values();
    for (std::size_t j = 0; j < z.size(); ++j) z[j] += dt * vv[j];
  }
  Points out(n);
  for (std::size_t i = 0; i < n; ++i) out[i].assign(z.begin() + i * d, z.begin() + (i + 1) * d);
  return out;
}

CheckResult make_check(std::string name) {
  CheckResult c;
  c.name = std::move(name);
  return c;
}

}  // namespace

std::string to_string(CheckStatus s) {
  return s == CheckStatus::pass ? "PASS" : s == CheckStatus::fail ? "FAIL" : "INCONCLUSIVE";
}

bool VerificationReport::passed() const {
  return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed(); });
}

std::string VerificationReport::to_json() const {
  nlohmann::json j;
  j["suite"] = suite;
  j["status"] = passed() ? "PASS" : "FAIL";
  j["checks"] = nlohmann::json::array();
  for (const auto& c : checks) {
    nlohmann::json cj;
    cj["check"] = c.name;
    cj["measured"] = c.measured;
    cj["thresholds"] = c.thresholds;
    cj["status"] = to_string(c.status);
    if (!c.note.empty()) cj["note"] = c.note;
    j["checks"].push_back(cj);
  }
  return j.dump(2);
}

MixtureSpec two_mode_mixture(double weight0, double stddev) {
  MixtureSpec m;
  m.dim = 2;
  m.components = {{{2.0, 0.0}, stddev, weight0}, {{-2.0, 0.0}, stddev, 1.0 - weight0}};
  m.validate();
  return m;
}

double mode_separation(const MixtureSpec& m) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < m.components.size(); ++i)
    for (std::size_t j = i + 1; j < m.components.size(); ++j)
      best = std::min(best, dist(m.components[i].mean, m.components[j].mean));
  return best;
}

ModeAveragingResult train_mode_regressor(const MixtureSpec& mixture, const TheoryTrainConfig& cfg) {
  mixture.validate();
  FmHead head = make_head(mixture, cfg);
  const auto c = condition_vector(mixture);
  const auto b = static_cast<std::size_t>(cfg.batch), d = static_cast<std::size_t>(mixture.dim);
  const Tensor hb = repeat_rows(c, b);
  const std::vector<Scalar> taus(b, 0);
  Optimizer opt(head.parameters(), adam_schedule(cfg), cfg.lr);
  auto predict = [&] {
    const auto p = head.forward(std::vector<Scalar>(d, 0), 0, c);
    return std::vector<double>(p.begin(), p.end());
  };
  std::vector<double> late;
  for (int n = 1; n <= cfg.steps; ++n) {
    const auto z1 = sample_mixture(mixture, cfg.batch, CounterRng::derive(cfg.seed, {0x4E6, static_cast<std::uint64_t>(n)}));
    head.parameters().zero_grad();
    Tape tape;
    Tensor pred = head.forward(tape, Tensor::zeros({b, d}), taus, hb);
    Tensor loss = mse_regression_loss(tape, pred, Tensor::from({b, d}, flatten(z1)));
    if (!std::isfinite(loss.item())) break;
    tape.backward(loss);
    opt.step(head.parameters(), decay_scale(n, cfg.steps));
    if (n == cfg.steps * 9 / 10) late = predict();
  }
  ModeAveragingResult r;
  r.prediction = predict();
  const auto mean = mixture.mean();
  r.dist_to_mean = dist(r.prediction, mean);
  r.min_dist_to_mode = std::numeric_limits<double>::infinity();
  for (const auto& comp : mixture.components) r.min_dist_to_mode = std::min(r.min_dist_to_mode, dist(r.prediction, comp.mean));
  const double sep = mode_separation(mixture);
  r.converged = !late.empty() && std::isfinite(r.dist_to_mean) && dist(late, r.prediction) < 0.02 * (std::isfinite(sep) ? sep : 1.0);
  return r;
}

VerificationReport verify_mode_averaging(const MixtureSpec& mixture, const TheoryTrainConfig& cfg) {
  VerificationReport rep;
  rep.suite = "mode-averaging";
  const auto r = train_mode_regressor(mixture, cfg);
  const double sep = mode_separation(mixture);
  auto c = make_check("regressor_converges_to_conditional_mean");
  c.measured["dist_to_mean"] = r.dist_to_mean;
  c.measured["min_dist_to_mode"] = r.min_dist_to_mode;
  c.measured["separation"] = sep;
  c.thresholds["max_dist_to_mean"] = 0.05 * sep;
  c.thresholds["min_dist_to_mode"] = 0.4 * sep;
  if (!r.converged) {
    c.status = CheckStatus::inconclusive;
    c.note = "prediction still moving at the end of the step budget";
  } else {
    c.status = r.dist_to_mean < 0.05 * sep && r.min_dist_to_mode >= 0.4 * sep ? CheckStatus::pass : CheckStatus::fail;
  }
  rep.checks.push_back(c);
  return rep;
}

CoverageResult measure_coverage(const MixtureSpec& mixture, Points endpoints) {
  CoverageResult r;
  const auto mean = mixture.mean();
  r.shares.assign(mixture.components.size(), 0.0);
  long mid = 0;
  for (const auto& e : endpoints) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < mixture.components.size(); ++k) {
      const double dk = dist(e, mixture.components[k].mean);
      if (dk < bd) {
        bd = dk;
        best = k;
      }
    }
    r.shares[best] += 1;
    mid += dist(e, mean) < bd;
  }
  for (std::size_t k = 0; k < r.shares.size(); ++k) {
    r.shares[k] /= double(endpoints.size());
    r.max_share_error = std::max(r.max_share_error, std::abs(r.shares[k] - mixture.components[k].weight));
  }
  r.midpoint_fraction = double(mid) / double(endpoints.size());
  r.endpoints = std::move(endpoints);
  return r;
}

CoverageResult train_and_integrate_cfm(const MixtureSpec& mixture, const TheoryTrainConfig& cfg, SourceKind source,
                                       int n, int steps) {
  mixture.validate();
  FmHead head = make_head(mixture, cfg);
  const auto c = condition_vector(mixture);
  const auto b = static_cast<std::size_t>(cfg.batch);
  const Tensor hb = repeat_rows(c, b);
  Optimizer opt(head.parameters(), adam_schedule(cfg), cfg.lr);
  for (int step = 1; step <= cfg.steps; ++step) {
    const auto z1 = sample_mixture(mixture, cfg.batch, CounterRng::derive(cfg.seed, {0xCF1, static_cast<std::uint64_t>(step)}));
    auto rng = CounterRng::stream(cfg.seed, {0xCF2, static_cast<std::uint64_t>(step)});
    std::vector<FlowSample> samples;
    for (const auto& z : z1) {
      const std::vector<Scalar> zf(z.begin(), z.end());
      samples.push_back(sample_flow(zf, rng, source, 0));
    }
    head.parameters().zero_grad();
    Tape tape;
    Tensor loss = sfr_loss(tape, samples, hb, head);
    if (!std::isfinite(loss.item())) throw NumericError("CFM training diverged at step " + std::to_string(step));
    tape.backward(loss);
    opt.step(head.parameters(), decay_scale(step, cfg.steps));
  }
  auto rng = CounterRng::stream(cfg.seed, {0xCF3});
  Points z0(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(mixture.dim), 0.0));
  if (source == SourceKind::gaussian)
    for (auto& z : z0)
      for (auto& x : z) x = rng.normal();
  return measure_coverage(mixture, integrate_from(head, c, std::move(z0), steps));
}

VerificationReport verify_cfm_multimodality(const MixtureSpec& mixture, const TheoryTrainConfig& cfg) {
  VerificationReport rep;
  rep.suite = "cfm-multimodal";
  auto coverage_check = [&](const std::string& name, const CoverageResult& r) {
    auto c = make_check(name);
    for (std::size_t k = 0; k < r.shares.size(); ++k) c.measured["share_" + std::to_string(k)] = r.shares[k];
    c.measured["max_share_error"] = r.max_share_error;
    c.measured["midpoint_fraction"] = r.midpoint_fraction;
    c.thresholds["max_share_error"] = 0.1;
    c.thresholds["midpoint_fraction"] = 0.05;
    return c;
  };
  auto covers = [](const CoverageResult& r) { return r.max_share_error <= 0.1 && r.midpoint_fraction < 0.05; };

  const auto gauss = train_and_integrate_cfm(mixture, cfg, SourceKind::gaussian);
  auto g = coverage_check("gaussian_source_covers_modes", gauss);
  g.status = covers(gauss) ? CheckStatus::pass : CheckStatus::fail;
  rep.checks.push_back(g);

  const auto constant = train_and_integrate_cfm(mixture, cfg, SourceKind::constant);
  auto k = coverage_check("constant_source_fails_coverage", constant);
  k.note = "passes when the constant-source ablation fails the coverage test";
  k.status = covers(constant) ? CheckStatus::fail : CheckStatus::pass;
  rep.checks.push_back(k);

  // the regression endpoint sits in the midpoint region the flow avoids
  TheoryTrainConfig reg = cfg;
  reg.steps = std::min(cfg.steps, 1500);
  const auto avg = train_mode_regressor(mixture, reg);
  auto m = make_check("regression_endpoint_in_midpoint_region");
  const auto single = measure_coverage(mixture, {avg.prediction});
  m.measured["regression_in_midpoint"] = single.midpoint_fraction;
  m.measured["cfm_midpoint_fraction"] = gauss.midpoint_fraction;
  m.thresholds["cfm_midpoint_fraction"] = 0.05;
  m.status = single.midpoint_fraction == 1.0 && gauss.midpoint_fraction < 0.05 ? CheckStatus::pass : CheckStatus::fail;
  rep.checks.push_back(m);
  return rep;
}

CheckResult check_mtp_identity(int instances, std::uint64_t seed) {
  auto c = make_check("mtp_identity");
  auto rng = CounterRng::stream(seed, {0x3714});
  double worst = 0;
  for (int i = 0; i < instances; ++i) {
    const int k = 1 + static_cast<int>(rng.below(4));
    const int v = 2 + static_cast<int>(rng.below(7));
    const int hidden = 1 + static_cast<int>(rng.below(4));
    const int len = k + 1 + static_cast<int>(rng.below(5));
    auto heads = MtpHeads::zeros(k, v, hidden);
    for (auto& w : heads.weights)
      for (auto& x : w) x = rng.normal();
    for (auto& b : heads.biases)
      for (auto& x : b) x = rng.normal();
    double z = 0;
    for (auto& p : heads.reference) z += p = 0.05 + rng.uniform();
    for (auto& p : heads.reference) p /= z;
    MtpBatch batch;
    for (int t = 0; t < len; ++t) {
      batch.tokens.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(v))));
      std::vector<double> h(static_cast<std::size_t>(hidden));
      for (auto& x : h) x = rng.normal();
      batch.hidden.push_back(std::move(h));
    }
    std::vector<double> alphas(static_cast<std::size_t>(k));
    for (auto& a : alphas) a = 0.1 + rng.uniform();
    const double mtp = mtp_loss(batch, heads, alphas);
    const double sfr = sfr_bregman_loss(batch, heads, alphas);
    worst = std::max(worst, std::abs(sfr - mtp) / mtp);
  }
  c.measured["instances"] = instances;
  c.measured["max_relative_error"] = worst;
  c.thresholds["max_relative_error"] = 1e-10;
  c.status = worst < 1e-10 ? CheckStatus::pass : CheckStatus::fail;
  return c;
}

CheckResult check_zero_horizon(int models, std::uint64_t seed) {
  auto c = make_check("zero_horizon_recovers_ar");
  double worst = 0;
  for (int i = 0; i < models; ++i) {
    BackboneConfig bc;
    bc.layers = 1;
    bc.hidden = 8;
    bc.heads = 2;
    bc.vocab = 6;
    bc.max_seq = 8;
    bc.seed = CounterRng::derive(seed, {static_cast<std::uint64_t>(i)});
    const LanguageModel lm(bc);
    auto rng = CounterRng::stream(seed, {0x2E0, static_cast<std::uint64_t>(i)});
    Tokens toks(8);
    for (auto& t : toks) t = static_cast<int>(rng.below(6));
    Tape tape(false);
    const Tokens in(toks.begin(), toks.end() - 1), out(toks.begin() + 1, toks.end());
    const double lar = ops::cross_entropy(tape, lm.logits(tape, in, 1), out, std::vector<int>(out.size(), 1)).item();
    MtpBatch batch;
    batch.tokens = toks;
    batch.hidden.assign(toks.size(), std::vector<double>{1.0});
    const double family = mtp_family_loss(lar, batch, MtpHeads::zeros(0, 6, 1), {}, 0.5);
    worst = std::max(worst, std::abs(family - lar));
  }
  c.measured["models"] = models;
  c.measured["max_abs_difference"] = worst;
  c.thresholds["max_abs_difference"] = 0;
  c.status = worst == 0 ? CheckStatus::pass : CheckStatus::fail;
  return c;
}

CheckResult check_proper_scoring(int distributions, std::uint64_t seed) {
  auto c = make_check("proper_scoring_grid_argmin");
  auto rng = CounterRng::stream(seed, {0xB51});
  int ok = 0;
  constexpr int kHalfWidth = 8;
  for (int trial = 0; trial < distributions; ++trial) {
    const int v = 2 + static_cast<int>(rng.below(7));
    std::vector<double> p(static_cast<std::size_t>(v));
    double z = 0;
    for (auto& x : p) z += x = 0.05 + rng.uniform();
    for (auto& x : p) x /= z;
    const double step = *std::min_element(p.begin(), p.end()) / (2.0 * kHalfWidth);
    bool both = true;
    for (int kind = 0; kind < 2; ++kind) {
      auto score = [&](const std::vector<double>& q) {
        return kind == 0 ? simplex::expected_brier_loss(p, q) : simplex::expected_log_loss(p, q);
      };
      // grid lines through p along every pair direction e_i - e_j
      double best = score(p);
      bool center_wins = true;
      for (int i = 0; i < v; ++i)
        for (int j = i + 1; j < v; ++j)
          for (int m = -kHalfWidth; m <= kHalfWidth; ++m) {
            if (m == 0) continue;
            auto q = p;
            q[static_cast<std::size_t>(i)] += m * step;
            q[static_cast<std::size_t>(j)] -= m * step;
            if (score(q) <= best) center_wins = false;
          }
      both = both && center_wins;
    }
    ok += both;
  }
  c.measured["distributions"] = distributions;
  c.measured["argmin_at_p"] = ok;
  c.thresholds["argmin_at_p"] = distributions;
  c.status = ok == distributions ? CheckStatus::pass : CheckStatus::fail;
  return c;
}

CheckResult check_oracle_field(std::uint64_t seed) {
  auto c = make_check("oracle_field_integration");
  auto rng = CounterRng::stream(seed, {0x0AC});
  double worst = 0;
  for (int d = 1; d <= 4; ++d)
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<double> a(static_cast<std::size_t>(d));
      double norm = 0;
      for (auto& x : a) {
        x = rng.normal();
        norm += x * x;
      }
      const double scale = 2.0 * rng.uniform() / std::sqrt(norm);
      for (auto& x : a) x *= scale;
      for (const auto& e : integrate_flow(dirac_oracle_field(a, 1 - 1.0 / 50), d, 64, 50, rng))
        for (std::size_t j = 0; j < a.size(); ++j) worst = std::max(worst, std::abs(e[j] - a[j]));
    }
  c.measured["max_abs_error"] = worst;
  c.thresholds["max_abs_error"] = 1e-2;
  c.status = worst < 1e-2 ? CheckStatus::pass : CheckStatus::fail;
  return c;
}

VerificationReport verify_inclusion_chain(const TheoryTrainConfig& cfg) {
  VerificationReport rep;
  rep.suite = "inclusion-chain";
  rep.checks.push_back(check_zero_horizon(100, 1));
  rep.checks.push_back(check_mtp_identity(1000, 2));
  const auto cfm = verify_cfm_multimodality(two_mode_mixture(), cfg);
  auto gap = make_check("source_randomness_gap");
  gap.measured["gaussian_covers"] = cfm.checks[0].passed();
  gap.measured["constant_fails"] = cfm.checks[1].passed();
  gap.status = cfm.checks[0].passed() && cfm.checks[1].passed() ? CheckStatus::pass : CheckStatus::fail;
  rep.checks.push_back(gap);
  return rep;
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = {"mtp-identity",   "proper-scoring", "oracle-field",
                                                 "mode-averaging", "cfm-multimodal", "inclusion-chain"};
  return names;
}

VerificationReport run_suite(const std::string& name) {
  if (name == "mtp-identity") {
    VerificationReport r;
    r.suite = name;
    r.checks.push_back(check_mtp_identity(1000, 2));
    r.checks.push_back(check_zero_horizon(100, 1));
    return r;
  }
  if (name == "proper-scoring") {
    VerificationReport r;
    r.suite = name;
    r.checks.push_back(check_proper_scoring(100, 3));
    return r;
  }
  if (name == "oracle-field") {
    VerificationReport r;
    r.suite = name;
    r.checks.push_back(check_oracle_field(4));
    return r;
  }
  if (name == "mode-averaging") return verify_mode_averaging(two_mode_mixture());
  if (name == "cfm-multimodal") return verify_cfm_multimodality(two_mode_mixture());
  if (name == "inclusion-chain") return verify_inclusion_chain();
  std::string known;
  for (const auto& n : suite_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown suite '" + name + "' (known: " + known + ")");
}

SFR_END_NAMESPACE
