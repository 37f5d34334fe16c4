#pragma once

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "sfr/model.hpp"
#include "sfr/rng.hpp"
#include "sfr/synthetic.hpp"

SFR_BEGIN_NAMESPACE

/// v(z, tau) for a fixed condition.
using VelocityField = std::function<std::vector<double>(std::span<const double> z, double tau)>;

/// Explicit Euler from N standard-normal draws on the left-endpoint grid
/// tau = 0, 1/steps, ..., (steps-1)/steps. Throws NumericError naming the
/// step at which a state stops being finite.
Points integrate_flow(const VelocityField& field, int d_z, int n, int steps, CounterRng& rng);
/// Same, through a trained head conditioned on one hidden state; all N
/// draws advance together as one batch.
Points integrate_flow(const FmHead& head, std::span<const Scalar> h, int n, int steps, CounterRng& rng);

/// The Dirac-target marginal field (a - z) / (1 - tau), with tau capped at
/// `tau_cap` so the last step stays finite.
VelocityField dirac_oracle_field(std::vector<double> a, double tau_cap);

/// Trace of the unbiased sample covariance of the endpoints.
double sed(const Points& endpoints);

struct SedReport {
  std::vector<double> raw;
  std::vector<double> normalized;  // raw / max
  double median = 0;               // of the normalized values
  std::vector<bool> fork;          // normalized > median
};

SedReport lock_fork_labels(std::span<const double> raw_seds);

/// h[q][s] is the hidden state for query q under style s at a fixed
/// position. Within-style scatter (over queries) divided by between-style
/// scatter (over styles), each a mean of covariance traces.
double ssi(const std::vector<std::vector<std::vector<double>>>& h);

/// Cumulative BLEU-n of `hyp` against `refs`: uniform weights over orders
/// 1..n, clipped precision, brevity penalty, no smoothing.
double bleu(const Tokens& hyp, const std::vector<Tokens>& refs, int n);
/// Mean over replies of BLEU-n against all other replies.
double cross_style_self_bleu(const std::vector<Tokens>& replies, int n);

/// Greedy at T = 0 (ties to the lowest index), otherwise softmax(logits / T).
int sample_token(std::span<const Scalar> logits, double temperature, CounterRng& rng);
/// Samples `length` tokens after `prompt`.
Tokens sample_response(const LanguageModel& model, const Tokens& prompt, int length, double temperature,
                       CounterRng& rng);

/// Hidden rows [len x hidden] of one sequence, after the final norm.
std::vector<std::vector<double>> hidden_states(const LanguageModel& model, const Tokens& tokens);

// ---------------------------------------------------------------------------
// Style-task probes

/// SSI at response position t0: the hidden state after the prompt and the
/// first t0 tokens of each condition's first template.
double style_ssi(const LanguageModel& model, const StyleDataset& ds, int t0);

struct CsSbResult {
  double temperature = 0;
  std::vector<double> cs_sb;  // orders 1..4
  double accuracy = 0;        // sampled responses found in the answer key
};

/// For every query, one reply per style; CS-SB averaged over queries and
/// over `rounds` independent sampling rounds.
CsSbResult style_cs_sb(const LanguageModel& model, const StyleDataset& ds, double temperature, std::uint64_t seed,
                       int rounds = 1);

struct SedProbe {
  std::vector<double> raw;      // one per response position 0 .. R-2
  std::vector<int> branches;    // distinct continuations in the answer key
  SedReport report;
};

/// Per-position SED of one dataset example through the FM head.
SedProbe probe_sed(const LanguageModel& model, const FmHead& head, const StyleDataset& ds, const Example& ex,
                   int horizon, int n, int steps, std::uint64_t seed);

/// Fraction of (lock, fork) position pairs within each probed sequence for
/// which the lock has the lower SED. Locks have one continuation, forks two
/// or more.
struct LockForkScore {
  long pairs = 0;
  long ordered = 0;
  double fraction() const { return pairs ? double(ordered) / double(pairs) : 0.0; }
};
void accumulate_lock_fork(const SedProbe& probe, LockForkScore& score);

void write_sed_jsonl(std::ostream& os, const SedReport& report, const Tokens& tokens);
void write_cs_sb_header(std::ostream& os);
void write_cs_sb_rows(std::ostream& os, const std::string& method, const CsSbResult& r);

SFR_END_NAMESPACE
