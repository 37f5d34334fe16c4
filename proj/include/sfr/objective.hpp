#pragma once

#include <span>
#include <string>
#include <vector>

#include "sfr/model.hpp"
#include "sfr/rng.hpp"

SFR_BEGIN_NAMESPACE

enum class GeometryKind { euclidean, bregman_kl, cosine, mse_regression };
enum class SourceKind { gaussian, constant };

std::string to_string(GeometryKind g);
std::string to_string(SourceKind s);
GeometryKind parse_geometry(const std::string& s);
SourceKind parse_source(const std::string& s);

/// One conditional flow-matching draw for a supervised position.
struct FlowSample {
  int position = 0;
  std::vector<Scalar> z0;
  std::vector<Scalar> z1;
  Scalar tau = 0;
  std::vector<Scalar> z_tau;  // (1 - tau) z0 + tau z1
  std::vector<Scalar> u;      // z1 - z0
};

FlowSample make_flow_sample(std::vector<Scalar> z0, std::vector<Scalar> z1, Scalar tau, int position = 0);

/// Draws z0 (standard normal, or the constant `source_value` for every
/// coordinate) and tau ~ U[0, 1], then builds the straight-line sample.
FlowSample sample_flow(std::span<const Scalar> z1, CounterRng& rng, SourceKind source = SourceKind::gaussian,
                       Scalar source_value = 0);

/// Stacked flow samples ready for the head.
struct FlowBatch {
  Tensor z_tau;  // [P x d_z]
  Tensor u;      // [P x d_z]
  std::vector<Scalar> taus;
};
FlowBatch stack_samples(const std::vector<FlowSample>& samples);

/// Mean over samples of the per-dimension mean of ||v_phi - (z1 - z0)||^2.
/// `h` holds one conditioning row per sample.
Tensor sfr_loss(Tape& tape, const FlowBatch& batch, const Tensor& h, const FmHead& head);
Tensor sfr_loss(Tape& tape, const std::vector<FlowSample>& samples, const Tensor& h, const FmHead& head);

/// L_AR + lambda * L_SFR.
Tensor total_loss(Tape& tape, const Tensor& lar, const Tensor& lsfr, Scalar lambda);

/// Mean over rows of the per-dimension mean squared error to z1
/// (the deterministic regression baseline).
Tensor mse_regression_loss(Tape& tape, const Tensor& prediction, const Tensor& z1);

/// Mean over rows of 1 - cos(prediction, z1); the prediction norm is
/// smoothed so a zero prediction has a finite gradient.
Tensor cosine_loss(Tape& tape, const Tensor& prediction, const Tensor& z1);

// ---------------------------------------------------------------------------
// Simplex-target (multi-token) family, double precision.

/// Hidden states h_t, one row per position, plus the token sequence the
/// horizons index into: h_t is scored against y[t + k].
struct MtpBatch {
  std::vector<std::vector<double>> hidden;
  std::vector<int> tokens;
};

/// sum_t sum_k alpha_k CE(q_k(h_t), y_{t+k}); terms lacking y_{t+k} are dropped.
double mtp_loss(const MtpBatch& batch, const MtpHeads& heads, std::span<const double> alphas);

/// The same objective read as velocity matching under the negative-entropy
/// Bregman divergence: velocities v = q - pi and u* = e(y) - pi are mapped
/// back to endpoints and scored with the generic D_Psi formula.
double sfr_bregman_loss(const MtpBatch& batch, const MtpHeads& heads, std::span<const double> alphas);

/// Velocity-form squared Euclidean loss sum alpha_k ||v - u*||^2.
double sfr_euclidean_loss(const MtpBatch& batch, const MtpHeads& heads, std::span<const double> alphas);
/// Endpoint-form Brier loss sum alpha_k ||q - e(y)||^2.
double brier_endpoint_loss(const MtpBatch& batch, const MtpHeads& heads, std::span<const double> alphas);

/// L_AR + lambda * L_MTP; K = 0 returns L_AR untouched.
double mtp_family_loss(double lar, const MtpBatch& batch, const MtpHeads& heads, std::span<const double> alphas,
                       double lambda);

namespace simplex {

/// Psi(p) = sum p_i log p_i with 0 log 0 = 0.
double neg_entropy(std::span<const double> p);
/// D_Psi(p || q) = Psi(p) - Psi(q) - <grad Psi(q), p - q>.
double bregman_neg_entropy(std::span<const double> p, std::span<const double> q);
double squared_distance(std::span<const double> p, std::span<const double> q);

/// E_{y ~ p} of the log loss -log q_y and of the Brier loss ||q - e(y)||^2.
double expected_log_loss(std::span<const double> p, std::span<const double> q);
double expected_brier_loss(std::span<const double> p, std::span<const double> q);
/// Gradients in q, projected onto the simplex tangent space (zero-sum).
std::vector<double> expected_log_loss_tangent_grad(std::span<const double> p, std::span<const double> q);
std::vector<double> expected_brier_loss_tangent_grad(std::span<const double> p, std::span<const double> q);

}  // namespace simplex

SFR_END_NAMESPACE
