#include "sfr/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

#include <json.hpp>

SFR_BEGIN_NAMESPACE

namespace {

void check_finite(const std::vector<double>& z, int step) {
  for (double x : z)
    if (!std::isfinite(x)) throw NumericError("flow integration produced a non-finite state at step " + std::to_string(step));
}

double trace_cov(const std::vector<const std::vector<double>*>& rows) {
  const std::size_t n = rows.size();
  if (n < 2) throw DegenerateError("covariance needs at least two samples");
  const std::size_t d = rows[0]->size();
  double total = 0;
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0;
    for (const auto* r : rows) {
      if (r->size() != d) throw DimensionError("covariance rows differ in dimension");
      mean += (*r)[j];
    }
    mean /= double(n);
    double ss = 0;
    for (const auto* r : rows) ss += ((*r)[j] - mean) * ((*r)[j] - mean);
    total += ss / double(n - 1);
  }
  return total;
}

std::map<Tokens, int> ngram_counts(const Tokens& t, int m) {
  std::map<Tokens, int> out;
  for (std::size_t i = 0; i + static_cast<std::size_t>(m) <= t.size(); ++i) ++out[Tokens(t.begin() + i, t.begin() + i + m)];
  return out;
}

}  // namespace

Points integrate_flow(const VelocityField& field, int d_z, int n, int steps, CounterRng& rng) {
  if (d_z < 1 || n < 1 || steps < 1) throw DomainError("integrate_flow needs d_z, N and steps >= 1");
  Points out;
  out.reserve(static_cast<std::size_t>(n));
  const double dt = 1.0 / steps;
  for (int i = 0; i < n; ++i) {
    std::vector<double> z(static_cast<std::size_t>(d_z));
    for (auto& x : z) x = rng.normal();
    for (int s = 0; s < steps; ++s) {
      const auto v = field(z, s * dt);
      if (v.size() != z.size()) throw DimensionError("velocity field returned the wrong dimension");
      for (std::size_t j = 0; j < z.size(); ++j) z[j] += dt * v[j];
      check_finite(z, s + 1);
    }
    out.push_back(std::move(z));
  }
  return out;
}

Points integrate_flow(const FmHead& head, std::span<const Scalar> h, int n, int steps, CounterRng& rng) {
  const auto& c = head.config();
  if (h.size() != static_cast<std::size_t>(c.input_dim)) throw DimensionError("integrate_flow: h has the wrong width");
  if (n < 1 || steps < 1) throw DomainError("integrate_flow needs N and steps >= 1");
  const auto rows = static_cast<std::size_t>(n), dz = static_cast<std::size_t>(c.d_z);
  std::vector<Scalar> z(rows * dz);
  for (auto& x : z) x = static_cast<Scalar>(rng.normal());
  std::vector<Scalar> hrep;
  hrep.reserve(rows * h.size());
  for (std::size_t i = 0; i < rows; ++i) hrep.insert(hrep.end(), h.begin(), h.end());
  const Tensor hb = Tensor::from({rows, h.size()}, std::move(hrep));
  const auto dt = static_cast<Scalar>(1.0 / steps);
  for (int s = 0; s < steps; ++s) {
    Tape tape(false);
    const std::vector<Scalar> taus(rows, static_cast<Scalar>(double(s) / steps));
    const Tensor v = head.forward(tape, Tensor::from({rows, dz}, z), taus, hb);
    const auto vv = v.values();
    for (std::size_t j = 0; j < z.size(); ++j) {
      z[j] += dt * vv[j];
      if (!std::isfinite(z[j]))
        throw NumericError("flow integration produced a non-finite state at step " + std::to_string(s + 1));
    }
  }
  Points out(rows);
  for (std::size_t i = 0; i < rows; ++i) out[i].assign(z.begin() + i * dz, z.begin() + (i + 1) * dz);
  return out;
}

VelocityField dirac_oracle_field(std::vector<double> a, double tau_cap) {
  if (!(tau_cap < 1)) throw DomainError("oracle field needs tau_cap < 1");
  return [a = std::move(a), tau_cap](std::span<const double> z, double tau) {
    const double t = std::min(tau, tau_cap);
    std::vector<double> v(z.size());
    for (std::size_t j = 0; j < z.size(); ++j) v[j] = (a.at(j) - z[j]) / (1 - t);
    return v;
  };
}

double sed(const Points& endpoints) {
  if (endpoints.size() < 2) throw DegenerateError("SED needs at least two endpoints");
  std::vector<const std::vector<double>*> rows;
  for (const auto& e : endpoints) rows.push_back(&e);
  return trace_cov(rows);
}

SedReport lock_fork_labels(std::span<const double> raw_seds) {
  if (raw_seds.empty()) throw DegenerateError("Lock/Fork labelling needs at least one SED value");
  const double mx = *std::max_element(raw_seds.begin(), raw_seds.end());
  if (!(mx > 0)) throw DegenerateError("all SED values are zero; nothing to normalize");
  SedReport r;
  r.raw.assign(raw_seds.begin(), raw_seds.end());
  for (double v : raw_seds) r.normalized.push_back(v / mx);
  auto sorted = r.normalized;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  r.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  for (double v : r.normalized) r.fork.push_back(v > r.median);
  return r;
}

double ssi(const std::vector<std::vector<std::vector<double>>>& h) {
  const std::size_t q = h.size();
  if (q < 2) throw DegenerateError("SSI needs at least two queries");
  const std::size_t s = h[0].size();
  if (s < 2) throw DegenerateError("SSI needs at least two styles");
  for (const auto& row : h)
    if (row.size() != s) throw DimensionError("SSI input is missing a (query, style) cell");
  double within = 0;
  for (std::size_t j = 0; j < s; ++j) {
    std::vector<const std::vector<double>*> rows;
    for (std::size_t i = 0; i < q; ++i) rows.push_back(&h[i][j]);
    within += trace_cov(rows);
  }
  within /= double(s);
  double between = 0;
  for (std::size_t i = 0; i < q; ++i) {
    std::vector<const std::vector<double>*> rows;
    for (std::size_t j = 0; j < s; ++j) rows.push_back(&h[i][j]);
    between += trace_cov(rows);
  }
  between /= double(q);
  if (!(between > 0)) throw DegenerateError("SSI: styles are indistinguishable (zero between-style scatter)");
  return within / between;
}

double bleu(const Tokens& hyp, const std::vector<Tokens>& refs, int n) {
  if (n < 1 || n > 4) throw DomainError("BLEU order must lie in 1..4");
  if (hyp.empty()) throw DomainError("BLEU of an empty reply");
  if (refs.empty()) throw DomainError("BLEU needs at least one reference");
  double log_sum = 0;
  for (int m = 1; m <= n; ++m) {
    const auto h = ngram_counts(hyp, m);
    std::map<Tokens, int> max_ref;
    for (const auto& r : refs)
      for (const auto& [g, c] : ngram_counts(r, m)) max_ref[g] = std::max(max_ref[g], c);
    long matched = 0, total = 0;
    for (const auto& [g, c] : h) {
      total += c;
      const auto it = max_ref.find(g);
      if (it != max_ref.end()) matched += std::min(c, it->second);
    }
    if (matched == 0) return 0.0;
    log_sum += std::log(double(matched) / double(total));
  }
  // closest reference length, shorter one on ties
  const double c = double(hyp.size());
  double r = double(refs[0].size());
  for (const auto& ref : refs) {
    const double len = double(ref.size());
    if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) r = len;
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / n);
}

double cross_style_self_bleu(const std::vector<Tokens>& replies, int n) {
  if (replies.size() < 2) throw DomainError("cross-style Self-BLEU needs at least two replies");
  for (const auto& r : replies)
    if (r.empty()) throw DomainError("cross-style Self-BLEU: empty reply");
  double total = 0;
  for (std::size_t i = 0; i < replies.size(); ++i) {
    std::vector<Tokens> refs;
    for (std::size_t j = 0; j < replies.size(); ++j)
      if (j != i) refs.push_back(replies[j]);
    total += bleu(replies[i], refs, n);
  }
  return total / double(replies.size());
}

int sample_token(std::span<const Scalar> logits, double temperature, CounterRng& rng) {
  if (logits.empty()) throw DomainError("sample_token: empty logits");
  if (temperature < 0) throw DomainError("temperature must be >= 0");
  if (temperature == 0) return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp((logits[i] - mx) / temperature);
  double u = rng.uniform() * z;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (u < p[i]) return static_cast<int>(i);
    u -= p[i];
  }
  return static_cast<int>(p.size() - 1);
}

Tokens sample_response(const LanguageModel& model, const Tokens& prompt, int length, double temperature,
                       CounterRng& rng) {
  if (prompt.empty()) throw DomainError("sample_response needs a nonempty prompt");
  Tokens seq = prompt;
  const auto vocab = static_cast<std::size_t>(model.backbone.config().vocab);
  for (int i = 0; i < length; ++i) {
    Tape tape(false);
    const Tensor logits = model.logits(tape, seq, 1);
    const auto all = logits.values();
    seq.push_back(sample_token(all.subspan((seq.size() - 1) * vocab, vocab), temperature, rng));
  }
  return Tokens(seq.begin() + static_cast<std::ptrdiff_t>(prompt.size()), seq.end());
}

std::vector<std::vector<double>> hidden_states(const LanguageModel& model, const Tokens& tokens) {
  Tape tape(false);
  const Tensor h = model.backbone.forward(tape, tokens, 1);
  std::vector<std::vector<double>> out(h.rows(), std::vector<double>(h.cols()));
  for (std::size_t r = 0; r < h.rows(); ++r)
    for (std::size_t c = 0; c < h.cols(); ++c) out[r][c] = h.at(r, c);
  return out;
}

double style_ssi(const LanguageModel& model, const StyleDataset& ds, int t0) {
  const int styles = ds.spec.num_styles, queries = ds.spec.num_queries;
  if (t0 < 0 || t0 >= ds.spec.response_len) throw DomainError("SSI position outside the response");
  std::vector<std::vector<std::vector<double>>> h(static_cast<std::size_t>(queries));
  for (int q = 0; q < queries; ++q)
    for (int s = 0; s < styles; ++s) {
      Example ex = ds.make_prompt(q, s);
      Tokens seq = ex.prompt;
      const auto& tpl = ds.answer_key.templates(q, s).at(0);
      seq.insert(seq.end(), tpl.begin(), tpl.begin() + t0);
      h[static_cast<std::size_t>(q)].push_back(hidden_states(model, seq).back());
    }
  return ssi(h);
}

CsSbResult style_cs_sb(const LanguageModel& model, const StyleDataset& ds, double temperature, std::uint64_t seed,
                       int rounds) {
  if (rounds < 1) throw DomainError("CS-SB needs at least one sampling round");
  CsSbResult r;
  r.temperature = temperature;
  r.cs_sb.assign(4, 0.0);
  long valid = 0, total = 0;
  for (int round = 0; round < rounds; ++round)
    for (int q = 0; q < ds.spec.num_queries; ++q) {
      std::vector<Tokens> replies;
      for (int s = 0; s < ds.spec.num_styles; ++s) {
        auto rng = CounterRng::stream(seed, {0xC55B, static_cast<std::uint64_t>(q), static_cast<std::uint64_t>(s),
                                             static_cast<std::uint64_t>(round)});
        replies.push_back(sample_response(model, ds.make_prompt(q, s).prompt, ds.spec.response_len, temperature, rng));
        valid += ds.answer_key.contains(q, s, replies.back());
        ++total;
      }
      for (int n = 1; n <= 4; ++n) r.cs_sb[static_cast<std::size_t>(n - 1)] += cross_style_self_bleu(replies, n);
    }
  for (auto& v : r.cs_sb) v /= double(ds.spec.num_queries) * rounds;
  r.accuracy = double(valid) / double(total);
  return r;
}

SedProbe probe_sed(const LanguageModel& model, const FmHead& head, const StyleDataset& ds, const Example& ex,
                   int horizon, int n, int steps, std::uint64_t seed) {
  const Tokens seq = ex.sequence();
  const auto h = hidden_states(model, Tokens(seq.begin(), seq.end() - 1));
  const int positions = static_cast<int>(ex.response.size()) - 1;  // the last token has no suffix
  SedProbe p;
  for (int t = 0; t < positions; ++t) {
    const auto& row = h[ex.prompt.size() + static_cast<std::size_t>(t)];
    const std::vector<Scalar> hs(row.begin(), row.end());
    auto rng = CounterRng::stream(seed, {0x5ED, static_cast<std::uint64_t>(t)});
    p.raw.push_back(sed(integrate_flow(head, hs, n, steps, rng)));
    p.branches.push_back(ds.answer_key.distinct_continuations(ex.query_id, ex.style_id, ex.response, t, horizon));
  }
  p.report = lock_fork_labels(p.raw);
  return p;
}

void accumulate_lock_fork(const SedProbe& probe, LockForkScore& score) {
  for (std::size_t i = 0; i < probe.raw.size(); ++i) {
    if (probe.branches[i] != 1) continue;
    for (std::size_t j = 0; j < probe.raw.size(); ++j) {
      if (probe.branches[j] < 2) continue;
      ++score.pairs;
      score.ordered += probe.raw[i] < probe.raw[j];
    }
  }
}

void write_sed_jsonl(std::ostream& os, const SedReport& report, const Tokens& tokens) {
  for (std::size_t i = 0; i < report.raw.size(); ++i) {
    nlohmann::json j;
    j["position"] = i;
    j["token"] = i < tokens.size() ? tokens[i] : -1;
    j["raw"] = report.raw[i];
    j["normalized"] = report.normalized[i];
    j["label"] = report.fork[i] ? "Fork" : "Lock";
    os << j.dump() << '\n';
  }
}

void write_cs_sb_header(std::ostream& os) { os << "method,temperature,metric,value\n"; }

void write_cs_sb_rows(std::ostream& os, const std::string& method, const CsSbResult& r) {
  char buf[128];
  for (std::size_t n = 0; n < r.cs_sb.size(); ++n) {
    std::snprintf(buf, sizeof buf, "%s,%g,cs_sb_%zu,%.9g\n", method.c_str(), r.temperature, n + 1, r.cs_sb[n]);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%s,%g,accuracy,%.9g\n", method.c_str(), r.temperature, r.accuracy);
  os << buf;
}

SFR_END_NAMESPACE
