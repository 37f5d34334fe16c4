#pragma once

#include <map>
#include <string>
#include <vector>

#include "sfr/objective.hpp"
#include "sfr/synthetic.hpp"

SFR_BEGIN_NAMESPACE

enum class CheckStatus { pass, fail, inconclusive };
std::string to_string(CheckStatus s);

struct CheckResult {
  std::string name;
  std::map<std::string, double> measured;
  std::map<std::string, double> thresholds;
  CheckStatus status = CheckStatus::fail;
  std::string note;

  bool passed() const { return status == CheckStatus::pass; }
};

struct VerificationReport {
  std::string suite;
  std::vector<CheckResult> checks;

  bool passed() const;
  std::string to_json() const;
};

/// Small MLP trained directly on a raw condition vector (no backbone).
struct TheoryTrainConfig {
  int steps = 1500;
  int batch = 256;
  double lr = 3e-3;
  int width = 64;
  int depth = 3;
  int time_dim = 8;
  std::uint64_t seed = 11;
};

/// The two-mode 2-D mixture used by the mode checks: means (+-2, 0),
/// stddev 0.4 (separation 10 sigma), weights w and 1 - w.
MixtureSpec two_mode_mixture(double weight0 = 0.5, double stddev = 0.4);
/// Smallest pairwise distance between component means.
double mode_separation(const MixtureSpec& m);

struct ModeAveragingResult {
  std::vector<double> prediction;
  double dist_to_mean = 0;
  double min_dist_to_mode = 0;
  bool converged = false;
};

/// Trains f(c) = v(0, 0; c) with MSE against mixture draws.
ModeAveragingResult train_mode_regressor(const MixtureSpec& mixture, const TheoryTrainConfig& cfg);
VerificationReport verify_mode_averaging(const MixtureSpec& mixture, const TheoryTrainConfig& cfg = {});

struct CoverageResult {
  std::vector<double> shares;  // endpoint mass per component (nearest mode)
  double midpoint_fraction = 0;  // closer to the mixture mean than to any mode
  double max_share_error = 0;
  Points endpoints;
};

/// Trains a CFM head on the mixture with the given source, then integrates
/// `n` endpoints with `steps` Euler steps from that source.
CoverageResult train_and_integrate_cfm(const MixtureSpec& mixture, const TheoryTrainConfig& cfg, SourceKind source,
                                       int n = 2000, int steps = 50);
/// Nearest-mode shares and midpoint mass of a point cloud.
CoverageResult measure_coverage(const MixtureSpec& mixture, Points endpoints);

/// Gaussian-source CFM must cover both modes; the constant-source variant
/// must fail the same coverage test.
VerificationReport verify_cfm_multimodality(const MixtureSpec& mixture, const TheoryTrainConfig& cfg = {});

/// Exact dual-formula identity over random simplex-target instances.
CheckResult check_mtp_identity(int instances, std::uint64_t seed);
/// K = 0 returns the autoregressive loss of random tiny models unchanged.
CheckResult check_zero_horizon(int models, std::uint64_t seed);
/// Expected Brier and log loss over y ~ p are minimized at q = p on a grid.
CheckResult check_proper_scoring(int distributions, std::uint64_t seed);
/// Euler integration of the Dirac oracle lands on the target.
CheckResult check_oracle_field(std::uint64_t seed);

VerificationReport verify_inclusion_chain(const TheoryTrainConfig& cfg = {});

/// Suite names accepted by run_suite.
const std::vector<std::string>& suite_names();
VerificationReport run_suite(const std::string& name);

SFR_END_NAMESPACE
