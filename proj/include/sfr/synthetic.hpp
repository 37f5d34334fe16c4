#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "sfr/common.hpp"

SFR_BEGIN_NAMESPACE

using Tokens = std::vector<int>;

/// Multi-style token task. Every (query, style) condition owns
/// `continuations_per_condition` response templates that share a
/// query-dependent core and branch apart at fixed divergence points; style
/// markers sit at several response positions.
struct StyleTaskSpec {
  int vocab_size = 64;
  int num_styles = 4;
  int num_queries = 16;
  int continuations_per_condition = 3;
  int response_len = 24;
  int query_len = 3;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Example {
  Tokens prompt;  // style token, then query tokens
  Tokens response;
  int style_id = 0;
  int query_id = 0;
  int template_id = 0;
  std::vector<int> response_mask;  // aligned to prompt ++ response

  Tokens sequence() const;
};

/// Token-id layout of the style task vocabulary.
struct StyleVocab {
  int num_styles;
  int marker_slots;
  int vocab_size;

  int style_token(int style) const { return style; }
  int marker_token(int style, int slot) const { return num_styles + style * marker_slots + slot; }
  int content_begin() const { return num_styles + num_styles * marker_slots; }
  int content_size() const { return vocab_size - content_begin(); }
};

/// The exact set of valid responses for every condition.
class AnswerKey {
 public:
  AnswerKey(int num_queries, int num_styles, std::vector<std::vector<Tokens>> templates)
      : num_queries_(num_queries), num_styles_(num_styles), templates_(std::move(templates)) {}

  const std::vector<Tokens>& templates(int query, int style) const {
    return templates_.at(static_cast<std::size_t>(query * num_styles_ + style));
  }
  int num_queries() const { return num_queries_; }
  int num_styles() const { return num_styles_; }
  bool contains(int query, int style, const Tokens& response) const;

  /// Templates of the condition that agree with `response[0..t]`.
  std::vector<int> consistent_templates(int query, int style, const Tokens& response, int t) const;
  /// Number of distinct windows response[t+1 .. t+k] (truncated at the end)
  /// among the templates consistent with the prefix through position t.
  /// One means the continuation is locked, two or more means it forks.
  int distinct_continuations(int query, int style, const Tokens& response, int t, int k) const;

 private:
  int num_queries_;
  int num_styles_;
  std::vector<std::vector<Tokens>> templates_;  // index query * num_styles + style
};

struct StyleDataset {
  StyleTaskSpec spec;
  std::vector<Example> examples;
  AnswerKey answer_key;
  std::vector<Tokens> queries;  // prompt query tokens per query id

  Example make_prompt(int query, int style) const;
};

/// Marker positions within the response (three evenly spaced slots).
std::vector<int> style_marker_positions(int response_len);
/// Positions at which template j > 0 splits off from template j - 1.
std::vector<int> divergence_positions(int response_len, int continuations);

StyleDataset gen_style_dataset(const StyleTaskSpec& spec);

void write_dataset(std::ostream& os, const StyleDataset& ds);
void write_answer_key(std::ostream& os, const StyleDataset& ds);
std::vector<Example> read_dataset(std::istream& is);

// ---------------------------------------------------------------------------
// Continuous mixtures for the theory lab

struct MixtureComponent {
  std::vector<double> mean;
  double stddev = 0;
  double weight = 0;
};

struct MixtureSpec {
  int dim = 1;
  std::vector<MixtureComponent> components;
  int condition = 0;

  void validate() const;
  std::vector<double> mean() const;
  /// Analytic covariance, row-major dim x dim.
  std::vector<double> covariance() const;
};

using Points = std::vector<std::vector<double>>;

/// i.i.d. draws; `labels`, when given, receives the drawn component index.
Points sample_mixture(const MixtureSpec& spec, int n, std::uint64_t seed, std::vector<int>* labels = nullptr);

SFR_END_NAMESPACE
