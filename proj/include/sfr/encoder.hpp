#pragma once

#include <atomic>
#include <cstdint>
#include <vector>

#include "sfr/common.hpp"
#include "sfr/synthetic.hpp"

SFR_BEGIN_NAMESPACE

/// Frozen target encoder: unigram and bigram counts of a token window,
/// pushed through a fixed Gaussian projection and L2-normalized.
class FrozenEncoder {
 public:
  FrozenEncoder(int vocab_size, int d_z = 32, std::uint64_t seed = 7);
  FrozenEncoder(const FrozenEncoder& other);

  int d_z() const { return d_z_; }
  int vocab_size() const { return vocab_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<float>& projection() const { return projection_; }

  /// Unit vector for a nonempty window.
  std::vector<Scalar> encode(const Tokens& window) const;

  /// Encodes tokens[t+1 .. t+k], truncated at the end of the sequence.
  std::vector<Scalar> encode_suffix(const Tokens& tokens, int t, int k) const;

  std::size_t calls() const { return calls_.load(); }
  void reset_calls() { calls_ = 0; }

 private:
  int vocab_;
  int d_z_;
  std::uint64_t seed_;
  std::vector<float> projection_;  // (V + V*V) x d_z
  mutable std::atomic<std::size_t> calls_{0};
};

struct AnchorPlan {
  int response_len = 0;
  int stride = 1;
  std::vector<int> anchors;
  std::vector<int> assignment;  // position -> anchor position

  std::size_t encoder_calls() const { return anchors.size(); }
};

/// Anchors every `stride` positions; every position maps to its nearest
/// anchor, ties going to the earlier one.
AnchorPlan plan_anchors(int response_len, int stride);

/// Suffix targets for positions 0 .. plan.response_len - 1 of `response`,
/// row-major [response_len x d_z]. The encoder runs once per anchor; other
/// positions copy their anchor's row.
std::vector<Scalar> encode_targets(const FrozenEncoder& enc, const Tokens& response, int k, const AnchorPlan& plan);

SFR_END_NAMESPACE
