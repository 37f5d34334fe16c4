#include "sfr/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "sfr/rng.hpp"

SFR_BEGIN_NAMESPACE

namespace {

constexpr int kMarkerSlots = 3;

enum StreamTag : std::uint64_t { kQueryStream = 11, kCoreStream = 12, kBranchStream = 13 };

std::string join(const std::vector<int>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? " " : "") << v[i];
  return os.str();
}

std::vector<int> parse_ints(const std::string& field) {
  std::istringstream is(field);
  std::vector<int> out;
  int x;
  while (is >> x) out.push_back(x);
  return out;
}

}  // namespace

void StyleTaskSpec::validate() const {
  if (continuations_per_condition < 2)
    throw ConfigError("continuations_per_condition must be >= 2 (each condition needs several valid responses), got " +
                      std::to_string(continuations_per_condition));
  if (num_styles < 1 || num_queries < 1 || query_len < 1)
    throw ConfigError("num_styles, num_queries and query_len must be positive");
  if (response_len < 8) throw ConfigError("response_len must be >= 8, got " + std::to_string(response_len));
  const StyleVocab vocab{num_styles, kMarkerSlots, vocab_size};
  if (vocab.content_size() < continuations_per_condition + 2)
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " leaves too few content tokens for " +
                      std::to_string(num_styles) + " styles");
  const auto div = divergence_positions(response_len, continuations_per_condition);
  if (div.back() >= response_len - 1)
    throw ConfigError("response_len " + std::to_string(response_len) + " too short for " +
                      std::to_string(continuations_per_condition) + " continuations");
}

Tokens Example::sequence() const {
  Tokens s = prompt;
  s.insert(s.end(), response.begin(), response.end());
  return s;
}

std::vector<int> style_marker_positions(int response_len) {
  const int q = response_len / 4;
  return {q, 2 * q, 3 * q};
}

std::vector<int> divergence_positions(int response_len, int continuations) {
  const int first = response_len / 3;
  const int step = std::max(1, (response_len / 2) / std::max(1, continuations - 1));
  std::vector<int> out;
  for (int i = 0; i + 1 < continuations; ++i) out.push_back(first + i * step);
  return out;
}

bool AnswerKey::contains(int query, int style, const Tokens& response) const {
  const auto& t = templates(query, style);
  return std::find(t.begin(), t.end(), response) != t.end();
}

std::vector<int> AnswerKey::consistent_templates(int query, int style, const Tokens& response, int t) const {
  std::vector<int> out;
  const auto& ts = templates(query, style);
  for (std::size_t j = 0; j < ts.size(); ++j) {
    const auto& tpl = ts[j];
    if (static_cast<int>(tpl.size()) <= t || static_cast<int>(response.size()) <= t) continue;
    if (std::equal(tpl.begin(), tpl.begin() + t + 1, response.begin())) out.push_back(static_cast<int>(j));
  }
  return out;
}

int AnswerKey::distinct_continuations(int query, int style, const Tokens& response, int t, int k) const {
  std::set<Tokens> windows;
  const auto& ts = templates(query, style);
  for (int j : consistent_templates(query, style, response, t)) {
    const auto& tpl = ts[static_cast<std::size_t>(j)];
    const int end = std::min<int>(t + k, static_cast<int>(tpl.size()) - 1);
    if (t + 1 > end) continue;
    windows.emplace(tpl.begin() + t + 1, tpl.begin() + end + 1);
  }
  return static_cast<int>(windows.size());
}

Example StyleDataset::make_prompt(int query, int style) const {
  Example ex;
  ex.prompt.push_back(StyleVocab{spec.num_styles, kMarkerSlots, spec.vocab_size}.style_token(style));
  const auto& q = queries.at(static_cast<std::size_t>(query));
  ex.prompt.insert(ex.prompt.end(), q.begin(), q.end());
  ex.style_id = style;
  ex.query_id = query;
  return ex;
}

StyleDataset gen_style_dataset(const StyleTaskSpec& spec) {
  spec.validate();
  const StyleVocab vocab{spec.num_styles, kMarkerSlots, spec.vocab_size};
  const int content = vocab.content_size();
  const int base = vocab.content_begin();
  const int len = spec.response_len;
  const auto markers = style_marker_positions(len);
  const auto div = divergence_positions(len, spec.continuations_per_condition);

  std::vector<Tokens> queries;
  std::set<Tokens> seen;
  for (int q = 0; q < spec.num_queries; ++q) {
    auto rng = CounterRng::stream(spec.seed, {kQueryStream, static_cast<std::uint64_t>(q)});
    Tokens toks;
    do {
      toks.clear();
      for (int i = 0; i < spec.query_len; ++i) toks.push_back(base + static_cast<int>(rng.below(content)));
    } while (!seen.insert(toks).second);
    queries.push_back(std::move(toks));
  }

  std::vector<std::vector<Tokens>> templates;
  std::vector<Example> examples;
  for (int q = 0; q < spec.num_queries; ++q) {
    auto core_rng = CounterRng::stream(spec.seed, {kCoreStream, static_cast<std::uint64_t>(q)});
    Tokens core(static_cast<std::size_t>(len));
    for (auto& tok : core) tok = base + static_cast<int>(core_rng.below(content));

    for (int s = 0; s < spec.num_styles; ++s) {
      const int branches = spec.continuations_per_condition;
      // branch_tokens[v][p]: token of branch v at position p (branch 0 is the core)
      std::vector<Tokens> branch_tokens(static_cast<std::size_t>(branches), core);
      for (int v = 1; v < branches; ++v) {
        for (int p = div[static_cast<std::size_t>(v - 1)]; p < len; ++p) {
          auto rng = CounterRng::stream(spec.seed, {kBranchStream, static_cast<std::uint64_t>(q),
                                                    static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(v),
                                                    static_cast<std::uint64_t>(p)});
          int tok;
          bool clash;
          do {
            tok = base + static_cast<int>(rng.below(content));
            clash = false;
            for (int u = 0; u < v; ++u) clash = clash || branch_tokens[static_cast<std::size_t>(u)][p] == tok;
          } while (clash);
          branch_tokens[static_cast<std::size_t>(v)][static_cast<std::size_t>(p)] = tok;
        }
      }

      std::vector<Tokens> cond;
      for (int j = 0; j < branches; ++j) {
        Tokens resp(static_cast<std::size_t>(len));
        for (int p = 0; p < len; ++p) {
          const auto slot = std::find(markers.begin(), markers.end(), p);
          if (slot != markers.end()) {
            resp[static_cast<std::size_t>(p)] = vocab.marker_token(s, static_cast<int>(slot - markers.begin()));
            continue;
          }
          const int passed = static_cast<int>(std::count_if(div.begin(), div.end(), [p](int d) { return d <= p; }));
          const int branch = std::min(j, passed);
          resp[static_cast<std::size_t>(p)] = branch_tokens[static_cast<std::size_t>(branch)][static_cast<std::size_t>(p)];
        }
        cond.push_back(resp);

        Example ex;
        ex.prompt.push_back(vocab.style_token(s));
        ex.prompt.insert(ex.prompt.end(), queries[static_cast<std::size_t>(q)].begin(),
                         queries[static_cast<std::size_t>(q)].end());
        ex.response = std::move(resp);
        ex.style_id = s;
        ex.query_id = q;
        ex.template_id = j;
        ex.response_mask.assign(ex.prompt.size(), 0);
        ex.response_mask.resize(ex.prompt.size() + ex.response.size(), 1);
        examples.push_back(std::move(ex));
      }
      templates.push_back(std::move(cond));
    }
  }
  return StyleDataset{spec, std::move(examples), AnswerKey(spec.num_queries, spec.num_styles, std::move(templates)),
                      std::move(queries)};
}

void write_dataset(std::ostream& os, const StyleDataset& ds) {
  os << "# sfr-style-dataset v1\n";
  os << "# style_id<TAB>query_id<TAB>template_id<TAB>prompt<TAB>response<TAB>mask\n";
  for (const auto& ex : ds.examples)
    os << ex.style_id << '\t' << ex.query_id << '\t' << ex.template_id << '\t' << join(ex.prompt) << '\t'
       << join(ex.response) << '\t' << join(ex.response_mask) << '\n';
}

void write_answer_key(std::ostream& os, const StyleDataset& ds) {
  os << "# sfr-answer-key v1\n";
  os << "# query_id<TAB>style_id<TAB>template_id<TAB>response\n";
  const auto& key = ds.answer_key;
  for (int q = 0; q < key.num_queries(); ++q)
    for (int s = 0; s < key.num_styles(); ++s) {
      const auto& ts = key.templates(q, s);
      for (std::size_t j = 0; j < ts.size(); ++j) os << q << '\t' << s << '\t' << j << '\t' << join(ts[j]) << '\n';
    }
}

std::vector<Example> read_dataset(std::istream& is) {
  std::vector<Example> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string f;
    while (std::getline(ls, f, '\t')) fields.push_back(f);
    if (fields.size() != 6) throw IoError("dataset line " + std::to_string(lineno) + ": expected 6 tab-separated fields");
    Example ex;
    ex.style_id = std::stoi(fields[0]);
    ex.query_id = std::stoi(fields[1]);
    ex.template_id = std::stoi(fields[2]);
    ex.prompt = parse_ints(fields[3]);
    ex.response = parse_ints(fields[4]);
    ex.response_mask = parse_ints(fields[5]);
    if (ex.response_mask.size() != ex.prompt.size() + ex.response.size())
      throw IoError("dataset line " + std::to_string(lineno) + ": mask length does not match sequence");
    out.push_back(std::move(ex));
  }
  return out;
}

void MixtureSpec::validate() const {
  if (dim < 1) throw ConfigError("mixture dimension must be positive");
  if (components.empty()) throw ConfigError("mixture needs at least one component");
  double total = 0;
  for (const auto& c : components) {
    if (static_cast<int>(c.mean.size()) != dim) throw DimensionError("mixture component mean has wrong dimension");
    if (!(c.weight > 0)) throw ConfigError("mixture weights must be positive");
    if (c.stddev < 0) throw ConfigError("mixture stddev must be non-negative");
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("mixture weights must sum to 1");
}

std::vector<double> MixtureSpec::mean() const {
  std::vector<double> m(static_cast<std::size_t>(dim), 0.0);
  for (const auto& c : components)
    for (int i = 0; i < dim; ++i) m[static_cast<std::size_t>(i)] += c.weight * c.mean[static_cast<std::size_t>(i)];
  return m;
}

std::vector<double> MixtureSpec::covariance() const {
  const auto mu = mean();
  const auto d = static_cast<std::size_t>(dim);
  std::vector<double> cov(d * d, 0.0);
  for (const auto& c : components)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        cov[i * d + j] += c.weight * (c.mean[i] - mu[i]) * (c.mean[j] - mu[j]);
        if (i == j) cov[i * d + j] += c.weight * c.stddev * c.stddev;
      }
  return cov;
}

Points sample_mixture(const MixtureSpec& spec, int n, std::uint64_t seed, std::vector<int>* labels) {
  spec.validate();
  if (n < 1) throw DomainError("sample_mixture: n must be >= 1");
  Points out;
  out.reserve(static_cast<std::size_t>(n));
  if (labels) labels->clear();
  for (int i = 0; i < n; ++i) {
    auto rng = CounterRng::stream(seed, {static_cast<std::uint64_t>(spec.condition), static_cast<std::uint64_t>(i)});
    const double u = rng.uniform();
    std::size_t c = 0;
    double acc = spec.components[0].weight;
    while (u >= acc && c + 1 < spec.components.size()) acc += spec.components[++c].weight;
    const auto& comp = spec.components[c];
    std::vector<double> p(comp.mean);
    if (comp.stddev > 0)
      for (auto& x : p) x += comp.stddev * rng.normal();
    out.push_back(std::move(p));
    if (labels) labels->push_back(static_cast<int>(c));
  }
  return out;
}

SFR_END_NAMESPACE
