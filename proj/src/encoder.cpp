#include "sfr/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "sfr/rng.hpp"

SFR_BEGIN_NAMESPACE

FrozenEncoder::FrozenEncoder(int vocab_size, int d_z, std::uint64_t seed) : vocab_(vocab_size), d_z_(d_z), seed_(seed) {
  if (vocab_size < 1 || d_z < 1) throw ConfigError("encoder needs positive vocab_size and d_z");
  const std::size_t features = static_cast<std::size_t>(vocab_) + static_cast<std::size_t>(vocab_) * vocab_;
  projection_.resize(features * static_cast<std::size_t>(d_z_));
  auto rng = CounterRng::stream(seed_, {0xE2C0DE});
  for (auto& w : projection_) w = static_cast<float>(rng.normal());
}

FrozenEncoder::FrozenEncoder(const FrozenEncoder& other)
    : vocab_(other.vocab_), d_z_(other.d_z_), seed_(other.seed_), projection_(other.projection_) {}

std::vector<Scalar> FrozenEncoder::encode(const Tokens& window) const {
  if (window.empty()) throw DomainError("encoder: empty window");
  calls_.fetch_add(1, std::memory_order_relaxed);
  const auto d = static_cast<std::size_t>(d_z_);
  std::vector<double> acc(d, 0.0);
  auto add_feature = [&](std::size_t f) {
    const float* row = projection_.data() + f * d;
    for (std::size_t j = 0; j < d; ++j) acc[j] += row[j];
  };
  for (std::size_t i = 0; i < window.size(); ++i) {
    const int tok = window[i];
    if (tok < 0 || tok >= vocab_) throw DomainError("encoder: token " + std::to_string(tok) + " outside vocabulary");
    add_feature(static_cast<std::size_t>(tok));
    if (i > 0)
      add_feature(static_cast<std::size_t>(vocab_) + static_cast<std::size_t>(window[i - 1]) * vocab_ +
                  static_cast<std::size_t>(tok));
  }
  double norm = 0;
  for (double v : acc) norm += v * v;
  norm = std::sqrt(norm);
  std::vector<Scalar> out(d);
  for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<Scalar>(acc[j] / norm);
  return out;
}

std::vector<Scalar> FrozenEncoder::encode_suffix(const Tokens& tokens, int t, int k) const {
  if (k < 1) throw ConfigError("suffix horizon k must be >= 1");
  const int n = static_cast<int>(tokens.size());
  if (t < 0 || t + 1 >= n) throw DomainError("no suffix after position " + std::to_string(t) + " of " + std::to_string(n));
  const int end = std::min(n, t + 1 + k);
  return encode(Tokens(tokens.begin() + t + 1, tokens.begin() + end));
}

AnchorPlan plan_anchors(int response_len, int stride) {
  if (stride <= 0) throw ConfigError("anchor stride must be >= 1, got " + std::to_string(stride));
  if (response_len < 1) throw ConfigError("anchor plan needs response_len >= 1");
  AnchorPlan plan;
  plan.response_len = response_len;
  plan.stride = stride;
  for (int a = 0; a < response_len; a += stride) plan.anchors.push_back(a);
  plan.assignment.resize(static_cast<std::size_t>(response_len));
  for (int p = 0; p < response_len; ++p) {
    const int lower = (p / stride) * stride;
    const int upper = lower + stride;
    plan.assignment[static_cast<std::size_t>(p)] = (upper < response_len && upper - p < p - lower) ? upper : lower;
  }
  return plan;
}

std::vector<Scalar> encode_targets(const FrozenEncoder& enc, const Tokens& response, int k, const AnchorPlan& plan) {
  const auto d = static_cast<std::size_t>(enc.d_z());
  std::vector<Scalar> out(static_cast<std::size_t>(plan.response_len) * d);
  for (int a : plan.anchors) {
    const auto z = enc.encode_suffix(response, a, k);
    std::copy(z.begin(), z.end(), out.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(a) * d));
  }
  for (int p = 0; p < plan.response_len; ++p) {
    const int a = plan.assignment[static_cast<std::size_t>(p)];
    if (a == p) continue;
    std::copy_n(out.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(a) * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(p) * d));
  }
  return out;
}

SFR_END_NAMESPACE
