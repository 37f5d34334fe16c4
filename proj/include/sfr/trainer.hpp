#pragma once

#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sfr/config.hpp"
#include "sfr/encoder.hpp"
#include "sfr/model.hpp"
#include "sfr/objective.hpp"
#include "sfr/synthetic.hpp"

SFR_BEGIN_NAMESPACE

/// lambda(n) for step n >= 1: lambda0 during phase A, then a linear ramp.
double lambda_at(int n, const Schedule& sched);
/// Multiplier on the base learning rate at step n (constant or cosine).
double lr_scale_at(int n, const Schedule& sched);

struct GatingState {
  double running = 0;  // L-bar
  bool initialized = false;
  bool last_gated = false;
};

/// Folds `loss` into the running mean (the first call seeds it), then gates
/// iff loss < L-bar / gamma.
bool gate_decision(double loss, GatingState& state, double gamma, double decay);

/// Logical OR over virtual ranks, as an all-reduce MAX would give.
bool simulate_rank_sync(const std::vector<bool>& per_rank_gate_flags);

/// ema <- mu * ema + (1 - mu) * live, elementwise. Throws StateError when
/// called before phase A has ended.
void ema_update(std::vector<std::vector<Scalar>>& ema, const ParameterSet& live, double mu, int step,
                int warmup_steps);

/// Adam (or plain SGD) over one parameter group. Moments live alongside the
/// parameters in entry order.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(const ParameterSet& params, const Schedule& sched, double lr);
  void step(ParameterSet& params, double lr_scale);

  long long t = 0;
  std::vector<std::vector<Scalar>> m, v;

 private:
  bool adam_ = true;
  double lr_ = 0, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
};

struct StepMetrics {
  int step = 0;
  double l_ar = 0;
  double l_sfr = 0;
  double lambda = 0;
  bool gated = false;
  double theta_grad_norm = 0;
  double phi_grad_norm = 0;

  bool operator==(const StepMetrics&) const = default;
};

void write_metrics_header(std::ostream& os);
void write_metrics_row(std::ostream& os, const StepMetrics& m);

/// One assembled batch of style-task examples.
struct TrainBatch {
  std::vector<int> examples;  // dataset indices
  std::size_t seq_len = 0;    // model input length per example
  std::size_t prompt_len = 0;
  std::vector<int> inputs;    // batch * seq_len
  std::vector<int> targets;
  std::vector<int> mask;
};

/// Inputs are prompt ++ response[0 .. R-2]; the target at input i is
/// token i + 1 and the mask covers response tokens.
TrainBatch make_batch(const StyleDataset& ds, const std::vector<int>& example_ids);

/// Input row of the hidden state that has consumed response[0..t].
inline std::size_t response_row(const TrainBatch& b, std::size_t example, int t) {
  return example * b.seq_len + b.prompt_len + static_cast<std::size_t>(t);
}

/// Zero-weight flow term through the head on one dummy position: a rank with
/// no supervised positions still runs the head, so every rank executes the
/// same step structure.
Tensor dummy_flow_term(Tape& tape, const FmHead& head);

/// Two-phase joint training on the synthetic style task.
class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg);

  const RunConfig& config() const { return cfg_; }
  int steps_done() const { return step_; }
  const StyleDataset& dataset() const { return dataset_; }
  const FrozenEncoder& encoder() const { return encoder_; }
  LanguageModel& model() { return model_; }
  const LanguageModel& model() const { return model_; }
  /// Null for SFT runs.
  const FmHead* fm_head() const { return fm_head_.get(); }
  FmHead* fm_head() { return fm_head_.get(); }
  /// Backbone plus LM head (theta) and the auxiliary head parameters (phi).
  ParameterSet theta() const { return model_.parameters(); }
  ParameterSet phi() const;
  const GatingState& gating() const { return gating_; }

  /// Runs step n = steps_done() + 1.
  StepMetrics step();
  /// Runs until `config().schedule.max_steps`; appends CSV rows when given.
  std::vector<StepMetrics> run(std::ostream* metrics_csv = nullptr);
  std::vector<int> batch_indices(int n) const;

  /// Published checkpoints hold only the backbone and LM head; resume
  /// checkpoints add auxiliary heads, encoder, optimizer, EMA and gating.
  void save(const std::string& path, bool published) const;
  static Trainer resume(const std::string& path);

 private:
  struct AuxResult {
    Tensor loss;
    std::vector<double> rank_losses;
  };
  AuxResult aux_loss(Tape& tape, const Tensor& h_fm, const TrainBatch& batch, int n) const;
  void dump_batch(const TrainBatch& batch, int n, const std::string& what) const;

  RunConfig cfg_;
  StyleDataset dataset_;
  FrozenEncoder encoder_;
  LanguageModel model_;
  std::unique_ptr<FmHead> fm_head_;
  ParameterSet mtp_params_;  // simplex-geometry heads, one [d x V] map per horizon
  Optimizer opt_theta_, opt_phi_;
  std::vector<std::vector<Scalar>> ema_;
  bool ema_initialized_ = false;
  GatingState gating_;
  int step_ = 0;

  friend struct CheckpointAccess;
};

SFR_END_NAMESPACE
