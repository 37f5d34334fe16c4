#include "sfr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <sstream>

#include "sfr/rng.hpp"

SFR_BEGIN_NAMESPACE

namespace {

enum StreamTag : std::uint64_t { kDataStream = 0xDA7A, kFlowStream = 0xF70 };

double grad_norm(const ParameterSet& params) {
  double s = 0;
  for (const auto& [name, t] : params.entries())
    if (t.has_grad())
      for (Scalar g : t.grad()) s += double(g) * g;
  return std::sqrt(s);
}

}  // namespace

double lambda_at(int n, const Schedule& sched) {
  if (n < 1) throw DomainError("lambda_at: steps are numbered from 1");
  if (n <= sched.warmup_steps) return sched.lambda0;  // phase A is steps 1..T_h
  if (sched.ramp_steps == 0) return sched.lambda0;
  return sched.lambda0 * std::min(1.0, double(n - sched.warmup_steps) / sched.ramp_steps);
}

double lr_scale_at(int n, const Schedule& sched) {
  if (sched.lr_schedule == "constant" || sched.max_steps <= 1) return 1.0;
  const double progress = std::clamp(double(n - 1) / double(sched.max_steps), 0.0, 1.0);
  return 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

bool gate_decision(double loss, GatingState& state, double gamma, double decay) {
  if (!state.initialized) {
    state.running = loss;
    state.initialized = true;
  } else {
    state.running = decay * state.running + (1 - decay) * loss;
  }
  state.last_gated = loss < state.running / gamma;
  return state.last_gated;
}

bool simulate_rank_sync(const std::vector<bool>& per_rank_gate_flags) {
  if (per_rank_gate_flags.empty()) throw DomainError("rank sync needs at least one virtual rank");
  return std::any_of(per_rank_gate_flags.begin(), per_rank_gate_flags.end(), [](bool f) { return f; });
}

void ema_update(std::vector<std::vector<Scalar>>& ema, const ParameterSet& live, double mu, int step,
                int warmup_steps) {
  if (step <= warmup_steps)
    throw StateError("EMA update at step " + std::to_string(step) + " is inside phase A (T_h = " +
                     std::to_string(warmup_steps) + ")");
  const auto& entries = live.entries();
  if (ema.size() != entries.size()) throw DimensionError("EMA state does not match the parameter set");
  const auto m = static_cast<Scalar>(mu), one_minus = static_cast<Scalar>(1 - mu);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto vals = entries[i].second.values();
    if (vals.size() != ema[i].size()) throw DimensionError("EMA entry " + entries[i].first + " has wrong size");
    for (std::size_t j = 0; j < vals.size(); ++j) ema[i][j] = m * ema[i][j] + one_minus * vals[j];
  }
}

Optimizer::Optimizer(const ParameterSet& params, const Schedule& sched, double lr)
    : adam_(sched.optimizer == "adam"), lr_(lr), b1_(sched.beta1), b2_(sched.beta2), eps_(sched.adam_eps) {
  for (const auto& [name, p] : params.entries()) {
    m.emplace_back(p.numel(), Scalar(0));
    v.emplace_back(adam_ ? p.numel() : 0, Scalar(0));
  }
}

void Optimizer::step(ParameterSet& params, double lr_scale) {
  auto& entries = params.entries();
  if (entries.size() != m.size()) throw DimensionError("optimizer state does not match the parameter set");
  ++t;
  const double lr = lr_ * lr_scale;
  if (!adam_) {
    for (auto& [name, p] : entries) {
      auto vals = p.mutable_values();
      const auto g = p.grad();
      for (std::size_t j = 0; j < vals.size(); ++j) vals[j] -= static_cast<Scalar>(lr) * g[j];
    }
    return;
  }
  const auto b1 = static_cast<Scalar>(b1_), b2 = static_cast<Scalar>(b2_);
  const auto c1 = static_cast<Scalar>(1 - b1_), c2 = static_cast<Scalar>(1 - b2_);
  const auto step_size = static_cast<Scalar>(lr / (1 - std::pow(b1_, double(t))));
  const auto v_corr = static_cast<Scalar>(1 / (1 - std::pow(b2_, double(t))));
  const auto eps = static_cast<Scalar>(eps_);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto vals = entries[i].second.mutable_values();
    const auto g = entries[i].second.grad();
    auto& mi = m[i];
    auto& vi = v[i];
    for (std::size_t j = 0; j < vals.size(); ++j) {
      mi[j] = b1 * mi[j] + c1 * g[j];
      vi[j] = b2 * vi[j] + c2 * g[j] * g[j];
      vals[j] -= step_size * mi[j] / (std::sqrt(vi[j] * v_corr) + eps);
    }
  }
}

void write_metrics_header(std::ostream& os) { os << "step,l_ar,l_sfr,lambda,gated,theta_grad_norm,phi_grad_norm\n"; }

void write_metrics_row(std::ostream& os, const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%d,%.9g,%.9g\n", m.step, m.l_ar, m.l_sfr, m.lambda, m.gated ? 1 : 0,
                m.theta_grad_norm, m.phi_grad_norm);
  os << buf;
}

TrainBatch make_batch(const StyleDataset& ds, const std::vector<int>& example_ids) {
  if (example_ids.empty()) throw DegenerateError("empty batch");
  TrainBatch b;
  b.examples = example_ids;
  const auto& first = ds.examples.at(static_cast<std::size_t>(example_ids[0]));
  b.prompt_len = first.prompt.size();
  b.seq_len = first.prompt.size() + first.response.size() - 1;
  for (int id : example_ids) {
    const auto& ex = ds.examples.at(static_cast<std::size_t>(id));
    const auto seq = ex.sequence();
    if (seq.size() != b.seq_len + 1 || ex.prompt.size() != b.prompt_len)
      throw DimensionError("batch examples must share prompt and response lengths");
    for (std::size_t i = 0; i < b.seq_len; ++i) {
      b.inputs.push_back(seq[i]);
      b.targets.push_back(seq[i + 1]);
      b.mask.push_back(ex.response_mask[i + 1]);
    }
  }
  return b;
}

Tensor dummy_flow_term(Tape& tape, const FmHead& head) {
  const auto& c = head.config();
  const Scalar tau[1] = {0};
  Tensor v = head.forward(tape, Tensor::zeros({1, static_cast<std::size_t>(c.d_z)}), tau,
                          Tensor::zeros({1, static_cast<std::size_t>(c.input_dim)}));
  return ops::scale(tape, ops::sum(tape, v), 0);
}

Trainer::Trainer(const RunConfig& cfg)
    : cfg_(cfg),
      dataset_(gen_style_dataset((cfg_.finalize(), cfg_.task))),
      encoder_(cfg_.task.vocab_size, cfg_.d_z, cfg_.encoder_seed),
      model_(cfg_.backbone) {
  const auto& s = cfg_.schedule;
  opt_theta_ = Optimizer(model_.parameters(), s, s.lr);
  if (!cfg_.uses_aux()) return;
  if (cfg_.target_space == TargetSpace::continuous) {
    fm_head_ = std::make_unique<FmHead>(cfg_.fm);
  } else {
    auto rng = CounterRng::stream(cfg_.fm.seed, {0x3770});
    const auto d = static_cast<std::size_t>(cfg_.backbone.hidden), v = static_cast<std::size_t>(cfg_.task.vocab_size);
    for (int k = 1; k <= s.horizon; ++k) {
      std::vector<Scalar> w(d * v);
      for (auto& x : w) x = static_cast<Scalar>(rng.normal() / std::sqrt(double(d)));
      mtp_params_.add("mtp_head.k" + std::to_string(k) + ".w", Tensor::from({d, v}, std::move(w)));
      mtp_params_.add("mtp_head.k" + std::to_string(k) + ".b", Tensor::zeros({v}));
    }
  }
  opt_phi_ = Optimizer(phi(), s, s.resolved_fm_lr());
}

ParameterSet Trainer::phi() const {
  ParameterSet out;
  if (fm_head_) out.extend(fm_head_->parameters());
  out.extend(mtp_params_);
  return out;
}

std::vector<int> Trainer::batch_indices(int n) const {
  auto rng = CounterRng::stream(cfg_.seed, {kDataStream, static_cast<std::uint64_t>(n)});
  std::vector<int> ids(static_cast<std::size_t>(cfg_.schedule.batch_size));
  for (auto& id : ids) id = static_cast<int>(rng.below(dataset_.examples.size()));
  return ids;
}

Trainer::AuxResult Trainer::aux_loss(Tape& tape, const Tensor& h_fm, const TrainBatch& batch, int n) const {
  const auto& s = cfg_.schedule;
  const int len = static_cast<int>(dataset_.spec.response_len) - 1;  // positions with a suffix
  const AnchorPlan plan = plan_anchors(len, s.stride);
  std::vector<int> positions;
  if (cfg_.sfr_all_positions) {
    for (int t = 0; t < len; ++t) positions.push_back(t);
  } else {
    positions = plan.anchors;
  }
  const std::size_t batch_n = batch.examples.size();
  const auto ranks = static_cast<std::size_t>(cfg_.virtual_ranks);
  const std::size_t dz = static_cast<std::size_t>(cfg_.d_z);

  AuxResult out;
  Tensor total;
  for (std::size_t r = 0; r < ranks; ++r) {
    const std::size_t lo = r * batch_n / ranks, hi = (r + 1) * batch_n / ranks;
    std::vector<std::size_t> rows;
    std::vector<int> row_pos, row_example;
    for (std::size_t b = lo; b < hi; ++b)
      for (int t : positions) {
        rows.push_back(response_row(batch, b, t));
        row_pos.push_back(t);
        row_example.push_back(static_cast<int>(b));
      }
    Tensor rank_loss;
    if (rows.empty()) {
      rank_loss = fm_head_ ? dummy_flow_term(tape, *fm_head_) : Tensor::scalar(0);
    } else if (cfg_.target_space == TargetSpace::continuous) {
      Tensor h_rows = ops::gather_rows(tape, h_fm, rows);
      std::vector<FlowSample> samples;
      std::vector<Scalar> z1_all;
      std::vector<std::vector<Scalar>> targets(hi - lo);
      for (std::size_t b = lo; b < hi; ++b) {
        const auto& resp = dataset_.examples[static_cast<std::size_t>(batch.examples[b])].response;
        targets[b - lo] = encode_targets(encoder_, resp, s.horizon, plan);
      }
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& tg = targets[static_cast<std::size_t>(row_example[i]) - lo];
        const std::span<const Scalar> z1(tg.data() + static_cast<std::size_t>(row_pos[i]) * dz, dz);
        if (cfg_.geometry == GeometryKind::euclidean) {
          auto rng = CounterRng::stream(cfg_.seed, {kFlowStream, static_cast<std::uint64_t>(n),
                                                    static_cast<std::uint64_t>(row_example[i]),
                                                    static_cast<std::uint64_t>(row_pos[i])});
          samples.push_back(sample_flow(z1, rng, cfg_.source, static_cast<Scalar>(cfg_.source_value)));
        } else {
          z1_all.insert(z1_all.end(), z1.begin(), z1.end());
        }
      }
      if (cfg_.geometry == GeometryKind::euclidean) {
        rank_loss = sfr_loss(tape, stack_samples(samples), h_rows, *fm_head_);
      } else {
        // deterministic predictor f(h) = v(0, 0; h) against the endpoint itself
        const std::vector<Scalar> taus(rows.size(), 0);
        Tensor pred = fm_head_->forward(tape, Tensor::zeros({rows.size(), dz}), taus, h_rows);
        Tensor z1 = Tensor::from({rows.size(), dz}, std::move(z1_all));
        rank_loss = cfg_.geometry == GeometryKind::cosine ? cosine_loss(tape, pred, z1)
                                                          : mse_regression_loss(tape, pred, z1);
      }
    } else {
      // simplex targets: one softmax head per horizon, weights alpha_k = 1/K
      const auto& entries = mtp_params_.entries();
      const auto vocab = static_cast<std::size_t>(cfg_.task.vocab_size);
      Tensor sum;
      for (int k = 1; k <= s.horizon; ++k) {
        std::vector<std::size_t> krows;
        std::vector<int> ktargets;
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const auto& resp = dataset_.examples[static_cast<std::size_t>(batch.examples[static_cast<std::size_t>(row_example[i])])].response;
          const int idx = row_pos[i] + k;
          if (idx >= static_cast<int>(resp.size())) continue;
          krows.push_back(rows[i]);
          ktargets.push_back(resp[static_cast<std::size_t>(idx)]);
        }
        if (krows.empty()) continue;
        Tensor hk = ops::gather_rows(tape, h_fm, krows);
        const Tensor& w = entries[static_cast<std::size_t>(2 * (k - 1))].second;
        const Tensor& bias = entries[static_cast<std::size_t>(2 * (k - 1) + 1)].second;
        Tensor logits = ops::linear(tape, hk, w, bias);
        Tensor term;
        if (cfg_.geometry == GeometryKind::bregman_kl) {
          const std::vector<int> ones(krows.size(), 1);
          term = ops::cross_entropy(tape, logits, ktargets, ones);
        } else {
          std::vector<Scalar> onehot(krows.size() * vocab, 0);
          for (std::size_t i = 0; i < krows.size(); ++i) onehot[i * vocab + static_cast<std::size_t>(ktargets[i])] = 1;
          Tensor e = Tensor::from({krows.size(), vocab}, std::move(onehot));
          term = ops::scale(tape, ops::mse_rows(tape, ops::softmax_rows(tape, logits), e), static_cast<Scalar>(vocab));
        }
        term = ops::scale(tape, term, Scalar(1) / static_cast<Scalar>(s.horizon));
        sum = sum.defined() ? ops::add(tape, sum, term) : term;
      }
      rank_loss = sum.defined() ? sum : Tensor::scalar(0);
    }
    out.rank_losses.push_back(rank_loss.item());
    total = total.defined() ? ops::add(tape, total, rank_loss) : rank_loss;
  }
  out.loss = ranks == 1 ? total : ops::scale(tape, total, Scalar(1) / static_cast<Scalar>(ranks));
  return out;
}

void Trainer::dump_batch(const TrainBatch& batch, int n, const std::string& what) const {
  std::ostringstream os;
  os << "non-finite " << what << " at step " << n << "; offending batch:\n";
  for (std::size_t b = 0; b < batch.examples.size(); ++b) {
    const auto& ex = dataset_.examples[static_cast<std::size_t>(batch.examples[b])];
    os << "  example " << batch.examples[b] << " (query " << ex.query_id << ", style " << ex.style_id << "):";
    for (int tok : ex.sequence()) os << ' ' << tok;
    os << '\n';
  }
  throw NumericError(os.str());
}

StepMetrics Trainer::step() {
  const int n = step_ + 1;
  const auto& s = cfg_.schedule;
  const bool aux = cfg_.uses_aux();
  const bool phase_a = aux && n <= s.warmup_steps;
  const TrainBatch batch = make_batch(dataset_, batch_indices(n));

  ParameterSet theta = model_.parameters(), phi_set = phi();
  theta.zero_grad();
  phi_set.zero_grad();
  if (aux && !phase_a && s.ema_mode != EmaMode::off && !ema_initialized_) {
    ema_ = phi_set.snapshot();
    ema_initialized_ = true;
  }

  StepMetrics m;
  m.step = n;
  Tape tape;
  // phase A: the backbone runs off the tape, so h reaches the head detached
  Tape frozen(false);
  Tape& backbone_tape = phase_a ? frozen : tape;
  const Tensor h = model_.backbone.forward(backbone_tape, batch.inputs, batch.examples.size());
  const Tensor lar = ops::cross_entropy(backbone_tape, model_.lm_head.forward(backbone_tape, h), batch.targets, batch.mask);
  m.l_ar = lar.item();
  if (!std::isfinite(m.l_ar)) dump_batch(batch, n, "L_AR");

  Tensor total = lar;
  if (aux) {
    m.lambda = lambda_at(n, s);
    AuxResult res = aux_loss(tape, phase_a ? detach(h) : h, batch, n);
    m.l_sfr = res.loss.item();
    if (!std::isfinite(m.l_sfr)) dump_batch(batch, n, "L_SFR");
    const bool wants = gate_decision(m.l_sfr, gating_, s.gate_gamma, s.gate_decay);
    std::vector<bool> flags;
    for (double l : res.rank_losses)
      flags.push_back(res.rank_losses.size() == 1 ? wants : l < gating_.running / s.gate_gamma);
    bool gated = s.gating == GatingMode::forced || (s.gating == GatingMode::adaptive && simulate_rank_sync(flags));
    gating_.last_gated = gated;
    m.gated = gated;
    // the recompute reuses the same (z0, tau): draws are keyed by step and position
    if (gated && !phase_a) res = aux_loss(tape, detach(h), batch, n);
    const auto lam = static_cast<Scalar>(m.lambda);
    total = phase_a ? ops::scale(tape, res.loss, lam) : total_loss(tape, lar, res.loss, lam);
  }
  tape.backward(total);

  m.theta_grad_norm = grad_norm(theta);
  m.phi_grad_norm = aux ? grad_norm(phi_set) : 0;
  const double scale = lr_scale_at(n, s);
  opt_theta_.step(theta, scale);
  if (aux) {
    opt_phi_.step(phi_set, scale);
    if (!phase_a && s.ema_mode != EmaMode::off) {
      ema_update(ema_, phi_set, s.ema_decay, n, s.warmup_steps);
      if (s.ema_mode == EmaMode::assign) phi_set.restore(ema_);
    }
  }
  step_ = n;
  return m;
}

std::vector<StepMetrics> Trainer::run(std::ostream* metrics_csv) {
  std::vector<StepMetrics> out;
  while (step_ < cfg_.schedule.max_steps) {
    out.push_back(step());
    if (metrics_csv) write_metrics_row(*metrics_csv, out.back());
  }
  return out;
}

SFR_END_NAMESPACE
