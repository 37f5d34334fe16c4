#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sfr/ops.hpp"
#include "sfr/tensor.hpp"

SFR_BEGIN_NAMESPACE

/// Ordered, named collection of trainable tensors.
class ParameterSet {
 public:
  /// Registers a trainable tensor and returns its handle.
  Tensor add(std::string name, Tensor t);
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;
  std::size_t numel() const;
  void zero_grad();
  /// Appends every entry of `other` (shared storage).
  void extend(const ParameterSet& other);

  /// Deep copy of all values, in entry order.
  std::vector<std::vector<Scalar>> snapshot() const;
  void restore(const std::vector<std::vector<Scalar>>& values);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

struct BackboneConfig {
  int layers = 2;
  int hidden = 64;
  int heads = 2;
  int vocab = 64;
  int max_seq = 32;
  std::uint64_t seed = 1;

  void validate() const;
  /// Backbone + LM head parameter count derived from the architecture.
  std::size_t parameter_count() const;
};

/// Pre-norm causal transformer F_theta. Its output is the final-layer-norm
/// hidden state that both the LM head and the FM head consume.
class Backbone {
 public:
  explicit Backbone(const BackboneConfig& cfg);
  Backbone(const Backbone&) = delete;
  Backbone& operator=(const Backbone&) = delete;
  Backbone(Backbone&&) = default;
  Backbone& operator=(Backbone&&) = default;

  const BackboneConfig& config() const { return cfg_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  /// `tokens` holds `batch` sequences of equal length back to back.
  /// Returns hidden states [batch*len x hidden].
  Tensor forward(Tape& tape, std::span<const int> tokens, std::size_t batch = 1) const;

 private:
  struct Layer {
    Tensor ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
  };
  BackboneConfig cfg_;
  ParameterSet params_;
  Tensor tok_emb_, pos_emb_, lnf_g_, lnf_b_;
  std::vector<Layer> layers_;
};

/// Un-embedding W_AR (no bias).
class LmHead {
 public:
  LmHead(int hidden, int vocab, std::uint64_t seed);
  Tensor forward(Tape& tape, const Tensor& h) const { return ops::matmul(tape, h, w_); }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

 private:
  ParameterSet params_;
  Tensor w_;
};

/// Backbone plus LM head: exactly the deployed autoregressive model.
struct LanguageModel {
  explicit LanguageModel(const BackboneConfig& cfg) : backbone(cfg), lm_head(cfg.hidden, cfg.vocab, cfg.seed) {}
  Backbone backbone;
  LmHead lm_head;

  Tensor logits(Tape& tape, std::span<const int> tokens, std::size_t batch = 1) const {
    return lm_head.forward(tape, backbone.forward(tape, tokens, batch));
  }
  ParameterSet parameters() const;
};

struct FmHeadConfig {
  int input_dim = 64;  // backbone hidden (or raw condition width in the theory lab)
  int d_z = 32;
  int width = 0;  // 0 -> input_dim / 2
  int depth = 3;  // number of linear layers, 3..5
  int time_dim = 8;
  std::uint64_t seed = 2;

  int resolved_width() const { return width > 0 ? width : std::max(1, input_dim / 2); }
  void validate() const;
  std::size_t parameter_count() const;
};

/// Sinusoidal embedding of tau in [0, 1]: sin/cos at frequencies pi * 2^i.
std::vector<Scalar> time_embedding(Scalar tau, int dim);

/// Conditional velocity MLP v_phi(z_tau, tau; h). The output projection
/// starts at exactly zero.
class FmHead {
 public:
  explicit FmHead(const FmHeadConfig& cfg);
  FmHead(const FmHead&) = delete;
  FmHead& operator=(const FmHead&) = delete;
  FmHead(FmHead&&) = default;
  FmHead& operator=(FmHead&&) = default;

  const FmHeadConfig& config() const { return cfg_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  /// Batched: z_tau [P x d_z], taus (P values), h [P x input_dim] -> [P x d_z].
  Tensor forward(Tape& tape, const Tensor& z_tau, std::span<const Scalar> taus, const Tensor& h) const;
  /// Single-point convenience wrapper.
  std::vector<Scalar> forward(std::span<const Scalar> z_tau, Scalar tau, std::span<const Scalar> h) const;

 private:
  FmHeadConfig cfg_;
  ParameterSet params_;
  std::vector<std::pair<Tensor, Tensor>> layers_;
};

/// Constant-velocity multi-token heads q_k = softmax(W_k h + b_k) with a
/// reference point pi inside the simplex. Double precision: these heads
/// exist to check exact loss identities.
struct MtpHeads {
  int horizons = 1;  // K
  int vocab = 2;
  int hidden = 1;
  std::vector<std::vector<double>> weights;  // per horizon, vocab x hidden
  std::vector<std::vector<double>> biases;   // per horizon, vocab
  std::vector<double> reference;             // pi

  /// All-zero heads with uniform reference.
  static MtpHeads zeros(int horizons, int vocab, int hidden);
  void validate() const;
  /// q_{k} for horizon k in 1..K.
  std::vector<double> forward(std::span<const double> h, int k) const;
};

SFR_END_NAMESPACE
