#include "sfr/objective.hpp"

#include <cmath>

SFR_BEGIN_NAMESPACE

std::string to_string(GeometryKind g) {
  switch (g) {
    case GeometryKind::euclidean: return "euclidean";
    case GeometryKind::bregman_kl: return "bregman_kl";
    case GeometryKind::cosine: return "cosine";
    case GeometryKind::mse_regression: return "mse_regression";
  }
  return "?";
}

std::string to_string(SourceKind s) { return s == SourceKind::gaussian ? "gaussian" : "constant"; }

GeometryKind parse_geometry(const std::string& s) {
  if (s == "euclidean") return GeometryKind::euclidean;
  if (s == "bregman_kl") return GeometryKind::bregman_kl;
  if (s == "cosine") return GeometryKind::cosine;
  if (s == "mse_regression") return GeometryKind::mse_regression;
  throw ConfigError("unknown geometry '" + s + "' (euclidean, bregman_kl, cosine, mse_regression)");
}

SourceKind parse_source(const std::string& s) {
  if (s == "gaussian") return SourceKind::gaussian;
  if (s == "constant") return SourceKind::constant;
  throw ConfigError("unknown source '" + s + "' (gaussian, constant)");
}

FlowSample make_flow_sample(std::vector<Scalar> z0, std::vector<Scalar> z1, Scalar tau, int position) {
  if (z0.size() != z1.size()) throw DimensionError("flow sample: z0 and z1 differ in dimension");
  FlowSample s;
  s.position = position;
  s.tau = tau;
  s.z_tau.resize(z1.size());
  s.u.resize(z1.size());
  for (std::size_t i = 0; i < z1.size(); ++i) {
    s.z_tau[i] = (1 - tau) * z0[i] + tau * z1[i];
    s.u[i] = z1[i] - z0[i];
  }
  s.z0 = std::move(z0);
  s.z1 = std::move(z1);
  return s;
}

FlowSample sample_flow(std::span<const Scalar> z1, CounterRng& rng, SourceKind source, Scalar source_value) {
  std::vector<Scalar> z0(z1.size());
  for (auto& x : z0) x = source == SourceKind::gaussian ? static_cast<Scalar>(rng.normal()) : source_value;
  const auto tau = static_cast<Scalar>(rng.uniform());
  return make_flow_sample(std::move(z0), {z1.begin(), z1.end()}, tau);
}

FlowBatch stack_samples(const std::vector<FlowSample>& samples) {
  if (samples.empty()) throw DegenerateError("no supervised positions for the flow loss");
  const std::size_t d = samples.front().z1.size();
  std::vector<Scalar> zt, u;
  FlowBatch b;
  zt.reserve(samples.size() * d);
  u.reserve(samples.size() * d);
  for (const auto& s : samples) {
    if (s.z1.size() != d) throw DimensionError("flow samples disagree in dimension");
    zt.insert(zt.end(), s.z_tau.begin(), s.z_tau.end());
    u.insert(u.end(), s.u.begin(), s.u.end());
    b.taus.push_back(s.tau);
  }
  b.z_tau = Tensor::from({samples.size(), d}, std::move(zt));
  b.u = Tensor::from({samples.size(), d}, std::move(u));
  return b;
}

Tensor sfr_loss(Tape& tape, const FlowBatch& batch, const Tensor& h, const FmHead& head) {
  if (batch.taus.empty()) throw DegenerateError("no supervised positions for the flow loss");
  Tensor v = head.forward(tape, batch.z_tau, batch.taus, h);
  return ops::mse_rows(tape, v, batch.u);
}

Tensor sfr_loss(Tape& tape, const std::vector<FlowSample>& samples, const Tensor& h, const FmHead& head) {
  return sfr_loss(tape, stack_samples(samples), h, head);
}

Tensor total_loss(Tape& tape, const Tensor& lar, const Tensor& lsfr, Scalar lambda) {
  if (!(lambda >= 0)) throw DomainError("lambda must be non-negative");
  return ops::add(tape, lar, ops::scale(tape, lsfr, lambda));
}

Tensor mse_regression_loss(Tape& tape, const Tensor& prediction, const Tensor& z1) {
  return ops::mse_rows(tape, prediction, z1);
}

Tensor cosine_loss(Tape& tape, const Tensor& prediction, const Tensor& z1) {
  if (prediction.shape() != z1.shape()) throw DimensionError("cosine loss: shape mismatch");
  const std::size_t m = prediction.rows(), n = prediction.cols();
  constexpr double kSmooth = 1e-4;
  // cos_r = <p_r, t_r> / (sqrt(|p_r|^2 + smooth) |t_r|)
  std::vector<double> dots(m), pn(m), tn(m);
  double total = 0;
  for (std::size_t r = 0; r < m; ++r) {
    double dot = 0, pp = 0, tt = 0;
    for (std::size_t c = 0; c < n; ++c) {
      const double p = prediction.at(r, c), t = z1.at(r, c);
      dot += p * t;
      pp += p * p;
      tt += t * t;
    }
    dots[r] = dot;
    pn[r] = std::sqrt(pp + kSmooth);
    tn[r] = std::sqrt(tt);
    if (tn[r] == 0) throw DegenerateError("cosine loss: zero target row");
    total += 1.0 - dot / (pn[r] * tn[r]);
  }
  Tensor out = Tensor::scalar(static_cast<Scalar>(total / double(m)),
                              tape.recording() && prediction.requires_grad());
  if (out.requires_grad()) {
    tape.record(out, [prediction, z1, out, dots, pn, tn, m, n]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0] / double(m);
      auto gp = prediction.grad();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) {
          const double p = prediction.at(r, c), t = z1.at(r, c);
          const double d = t / (pn[r] * tn[r]) - dots[r] * p / (pn[r] * pn[r] * pn[r] * tn[r]);
          gp[r * n + c] -= static_cast<Scalar>(g * d);
        }
    });
  }
  return out;
}

namespace {

void check_alphas(const MtpHeads& heads, std::span<const double> alphas) {
  heads.validate();
  if (static_cast<int>(alphas.size()) != heads.horizons)
    throw DimensionError("mtp: expected " + std::to_string(heads.horizons) + " horizon weights, got " +
                         std::to_string(alphas.size()));
  for (double a : alphas)
    if (!(a >= 0)) throw DomainError("mtp: horizon weights must be non-negative");
}

template <typename Term>
double sum_terms(const MtpBatch& batch, const MtpHeads& heads, std::span<const double> alphas, Term term) {
  check_alphas(heads, alphas);
  const int n = static_cast<int>(batch.tokens.size());
  double total = 0;
  for (std::size_t t = 0; t < batch.hidden.size(); ++t) {
    for (int k = 1; k <= heads.horizons; ++k) {
      const int idx = static_cast<int>(t) + k;
      if (idx >= n) continue;
      const int y = batch.tokens[static_cast<std::size_t>(idx)];
      if (y < 0 || y >= heads.vocab) throw DomainError("mtp: target token outside vocabulary");
      const auto q = heads.forward(batch.hidden[t], k);
      total += alphas[static_cast<std::size_t>(k - 1)] * term(q, y);
    }
  }
  return total;
}

std::vector<double> one_hot(int y, int vocab) {
  std::vector<double> e(static_cast<std::size_t>(vocab), 0.0);
  e[static_cast<std::size_t>(y)] = 1.0;
  return e;
}

}  // namespace

double mtp_loss(const MtpBatch& batch, const MtpHeads& heads, std::span<const double> alphas) {
  return sum_terms(batch, heads, alphas,
                   [](const std::vector<double>& q, int y) { return -std::log(q[static_cast<std::size_t>(y)]); });
}

double sfr_bregman_loss(const MtpBatch& batch, const MtpHeads& heads, std::span<const double> alphas) {
  const auto& pi = heads.reference;
  return sum_terms(batch, heads, alphas, [&](const std::vector<double>& q, int y) {
    const std::size_t v = q.size();
    std::vector<double> vel(v), target_vel(v), endpoint(v), target(v);
    const auto e = one_hot(y, static_cast<int>(v));
    for (std::size_t i = 0; i < v; ++i) {
      vel[i] = q[i] - pi[i];
      target_vel[i] = e[i] - pi[i];
    }
    for (std::size_t i = 0; i < v; ++i) {
      endpoint[i] = vel[i] + pi[i];
      target[i] = target_vel[i] + pi[i];
    }
    return simplex::bregman_neg_entropy(target, endpoint);
  });
}

double sfr_euclidean_loss(const MtpBatch& batch, const MtpHeads& heads, std::span<const double> alphas) {
  const auto& pi = heads.reference;
  return sum_terms(batch, heads, alphas, [&](const std::vector<double>& q, int y) {
    double s = 0;
    for (std::size_t i = 0; i < q.size(); ++i) {
      const double vel = q[i] - pi[i];
      const double target_vel = (static_cast<int>(i) == y ? 1.0 : 0.0) - pi[i];
      s += (vel - target_vel) * (vel - target_vel);
    }
    return s;
  });
}

double brier_endpoint_loss(const MtpBatch& batch, const MtpHeads& heads, std::span<const double> alphas) {
  return sum_terms(batch, heads, alphas, [](const std::vector<double>& q, int y) {
    return simplex::squared_distance(q, one_hot(y, static_cast<int>(q.size())));
  });
}

double mtp_family_loss(double lar, const MtpBatch& batch, const MtpHeads& heads, std::span<const double> alphas,
                       double lambda) {
  if (heads.horizons == 0) return lar;
  return lar + lambda * mtp_loss(batch, heads, alphas);
}

namespace simplex {

double neg_entropy(std::span<const double> p) {
  double s = 0;
  for (double x : p)
    if (x > 0) s += x * std::log(x);
  return s;
}

double bregman_neg_entropy(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DimensionError("bregman: dimension mismatch");
  double inner = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(q[i] > 0)) throw DomainError("bregman: q must lie in the simplex interior");
    inner += (std::log(q[i]) + 1.0) * (p[i] - q[i]);
  }
  return neg_entropy(p) - neg_entropy(q) - inner;
}

double squared_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DimensionError("squared distance: dimension mismatch");
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - q[i]) * (p[i] - q[i]);
  return s;
}

double expected_log_loss(std::span<const double> p, std::span<const double> q) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0) s -= p[i] * std::log(q[i]);
  return s;
}

double expected_brier_loss(std::span<const double> p, std::span<const double> q) {
  // E||q - e_y||^2 = ||q||^2 - 2 <p, q> + 1
  double qq = 0, pq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    qq += q[i] * q[i];
    pq += p[i] * q[i];
  }
  return qq - 2 * pq + 1;
}

namespace {
std::vector<double> project_tangent(std::vector<double> g) {
  double mean = 0;
  for (double x : g) mean += x;
  mean /= static_cast<double>(g.size());
  for (auto& x : g) x -= mean;
  return g;
}
}  // namespace

std::vector<double> expected_log_loss_tangent_grad(std::span<const double> p, std::span<const double> q) {
  std::vector<double> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) g[i] = -p[i] / q[i];
  return project_tangent(std::move(g));
}

std::vector<double> expected_brier_loss_tangent_grad(std::span<const double> p, std::span<const double> q) {
  std::vector<double> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) g[i] = 2 * (q[i] - p[i]);
  return project_tangent(std::move(g));
}

}  // namespace simplex

SFR_END_NAMESPACE
