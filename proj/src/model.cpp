#include "sfr/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sfr/rng.hpp"

SFR_BEGIN_NAMESPACE

namespace {

Tensor normal_init(Shape shape, double stddev, CounterRng& rng) {
  std::vector<Scalar> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Scalar>(stddev * rng.normal());
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor linear_init(std::size_t in, std::size_t out, CounterRng& rng) {
  return normal_init({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
}

}  // namespace

Tensor ParameterSet::add(std::string name, Tensor t) {
  if (find(name)) throw ConfigError("duplicate parameter name " + name);
  t.set_requires_grad(true);
  entries_.emplace_back(std::move(name), std::move(t));
  return entries_.back().second;
}

Tensor* ParameterSet::find(const std::string& name) {
  for (auto& [n, t] : entries_)
    if (n == name) return &t;
  return nullptr;
}

const Tensor* ParameterSet::find(const std::string& name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return &t;
  return nullptr;
}

std::size_t ParameterSet::numel() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

void ParameterSet::extend(const ParameterSet& other) {
  for (const auto& [n, t] : other.entries_) add(n, t);
}

std::vector<std::vector<Scalar>> ParameterSet::snapshot() const {
  std::vector<std::vector<Scalar>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.emplace_back(e.second.values().begin(), e.second.values().end());
  return out;
}

void ParameterSet::restore(const std::vector<std::vector<Scalar>>& values) {
  if (values.size() != entries_.size()) throw DimensionError("parameter snapshot has wrong entry count");
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto dst = entries_[i].second.mutable_values();
    if (dst.size() != values[i].size()) throw DimensionError("parameter snapshot entry " + entries_[i].first + " has wrong size");
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

void BackboneConfig::validate() const {
  if (layers < 1 || hidden < 1 || heads < 1 || vocab < 2 || max_seq < 2)
    throw ConfigError("backbone config fields must be positive (vocab >= 2, max_seq >= 2)");
  if (hidden % heads != 0)
    throw ConfigError("hidden size " + std::to_string(hidden) + " is not divisible by heads " + std::to_string(heads));
}

std::size_t BackboneConfig::parameter_count() const {
  const std::size_t d = static_cast<std::size_t>(hidden), v = static_cast<std::size_t>(vocab);
  const std::size_t per_layer = 12 * d * d + 13 * d;
  return v * d + static_cast<std::size_t>(max_seq) * d + static_cast<std::size_t>(layers) * per_layer + 2 * d + d * v;
}

Backbone::Backbone(const BackboneConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  auto rng = CounterRng::stream(cfg_.seed, {0xBAC0});
  const auto d = static_cast<std::size_t>(cfg_.hidden);
  tok_emb_ = params_.add("backbone.tok_emb", normal_init({static_cast<std::size_t>(cfg_.vocab), d}, 1.0, rng));
  pos_emb_ = params_.add("backbone.pos_emb", normal_init({static_cast<std::size_t>(cfg_.max_seq), d}, 1.0, rng));
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "backbone.layer" + std::to_string(l) + ".";
    Layer layer;
    layer.ln1_g = params_.add(p + "ln1.g", Tensor::full({d}, 1));
    layer.ln1_b = params_.add(p + "ln1.b", Tensor::zeros({d}));
    layer.w_qkv = params_.add(p + "attn.w_qkv", linear_init(d, 3 * d, rng));
    layer.b_qkv = params_.add(p + "attn.b_qkv", Tensor::zeros({3 * d}));
    // residual projections are scaled down so the stream starts near identity
    layer.w_o = params_.add(p + "attn.w_o", normal_init({d, d}, 0.5 / std::sqrt(double(d) * cfg_.layers), rng));
    layer.b_o = params_.add(p + "attn.b_o", Tensor::zeros({d}));
    layer.ln2_g = params_.add(p + "ln2.g", Tensor::full({d}, 1));
    layer.ln2_b = params_.add(p + "ln2.b", Tensor::zeros({d}));
    layer.w_fc = params_.add(p + "mlp.w_fc", linear_init(d, 4 * d, rng));
    layer.b_fc = params_.add(p + "mlp.b_fc", Tensor::zeros({4 * d}));
    layer.w_proj = params_.add(p + "mlp.w_proj", normal_init({4 * d, d}, 0.5 / std::sqrt(4.0 * double(d) * cfg_.layers), rng));
    layer.b_proj = params_.add(p + "mlp.b_proj", Tensor::zeros({d}));
    layers_.push_back(layer);
  }
  lnf_g_ = params_.add("backbone.ln_f.g", Tensor::full({d}, 1));
  lnf_b_ = params_.add("backbone.ln_f.b", Tensor::zeros({d}));
}

Tensor Backbone::forward(Tape& tape, std::span<const int> tokens, std::size_t batch) const {
  if (batch == 0 || tokens.size() % batch != 0)
    throw DimensionError("backbone: " + std::to_string(tokens.size()) + " tokens do not split into " +
                         std::to_string(batch) + " sequences");
  const std::size_t len = tokens.size() / batch;
  if (len == 0) throw DimensionError("backbone: empty sequence");
  if (len > static_cast<std::size_t>(cfg_.max_seq))
    throw DimensionError("backbone: sequence length " + std::to_string(len) + " exceeds max_seq " +
                         std::to_string(cfg_.max_seq));
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % len);

  Tensor x = ops::add(tape, ops::embedding(tape, tok_emb_, tokens), ops::embedding(tape, pos_emb_, positions));
  for (const auto& L : layers_) {
    Tensor a = ops::layer_norm(tape, x, L.ln1_g, L.ln1_b);
    Tensor qkv = ops::linear(tape, a, L.w_qkv, L.b_qkv);
    Tensor att = ops::causal_attention(tape, qkv, batch, len, static_cast<std::size_t>(cfg_.heads));
    x = ops::add(tape, x, ops::linear(tape, att, L.w_o, L.b_o));
    Tensor m = ops::layer_norm(tape, x, L.ln2_g, L.ln2_b);
    Tensor f = ops::gelu(tape, ops::linear(tape, m, L.w_fc, L.b_fc));
    x = ops::add(tape, x, ops::linear(tape, f, L.w_proj, L.b_proj));
  }
  return ops::layer_norm(tape, x, lnf_g_, lnf_b_);
}

LmHead::LmHead(int hidden, int vocab, std::uint64_t seed) {
  auto rng = CounterRng::stream(seed, {0x1EAD});
  w_ = params_.add("lm_head.w", linear_init(static_cast<std::size_t>(hidden), static_cast<std::size_t>(vocab), rng));
}

ParameterSet LanguageModel::parameters() const {
  ParameterSet all;
  all.extend(backbone.parameters());
  all.extend(lm_head.parameters());
  return all;
}

void FmHeadConfig::validate() const {
  if (input_dim < 1 || d_z < 1) throw ConfigError("fm head needs positive input_dim and d_z");
  if (depth < 2) throw ConfigError("fm head depth must be >= 2, got " + std::to_string(depth));
  if (time_dim < 2 || time_dim % 2 != 0) throw ConfigError("fm head time_dim must be a positive even number");
}

std::size_t FmHeadConfig::parameter_count() const {
  const std::size_t in = static_cast<std::size_t>(d_z + time_dim + input_dim);
  const std::size_t w = static_cast<std::size_t>(resolved_width());
  const std::size_t dz = static_cast<std::size_t>(d_z);
  return (in * w + w) + static_cast<std::size_t>(depth - 2) * (w * w + w) + (w * dz + dz);
}

std::vector<Scalar> time_embedding(Scalar tau, int dim) {
  std::vector<Scalar> out(static_cast<std::size_t>(dim));
  for (int i = 0; i < dim / 2; ++i) {
    const double w = std::numbers::pi * std::ldexp(1.0, i);
    out[static_cast<std::size_t>(2 * i)] = static_cast<Scalar>(std::sin(w * tau));
    out[static_cast<std::size_t>(2 * i + 1)] = static_cast<Scalar>(std::cos(w * tau));
  }
  return out;
}

FmHead::FmHead(const FmHeadConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  auto rng = CounterRng::stream(cfg_.seed, {0xF10});
  const std::size_t in = static_cast<std::size_t>(cfg_.d_z + cfg_.time_dim + cfg_.input_dim);
  const std::size_t w = static_cast<std::size_t>(cfg_.resolved_width());
  std::size_t fan_in = in;
  for (int l = 0; l < cfg_.depth; ++l) {
    const bool last = l + 1 == cfg_.depth;
    const std::size_t out = last ? static_cast<std::size_t>(cfg_.d_z) : w;
    const std::string p = "fm_head.l" + std::to_string(l) + ".";
    Tensor wt = last ? Tensor::zeros({fan_in, out}) : linear_init(fan_in, out, rng);
    Tensor bt = Tensor::zeros({out});
    Tensor w_handle = params_.add(p + "w", wt);
    Tensor b_handle = params_.add(p + "b", bt);
    layers_.emplace_back(w_handle, b_handle);
    fan_in = out;
  }
}

Tensor FmHead::forward(Tape& tape, const Tensor& z_tau, std::span<const Scalar> taus, const Tensor& h) const {
  const std::size_t p = z_tau.rows();
  if (z_tau.cols() != static_cast<std::size_t>(cfg_.d_z) || h.cols() != static_cast<std::size_t>(cfg_.input_dim) ||
      h.rows() != p || taus.size() != p)
    throw DimensionError("fm head: z_tau " + shape_string(z_tau.shape()) + ", h " + shape_string(h.shape()) + ", " +
                         std::to_string(taus.size()) + " taus do not line up");
  std::vector<Scalar> temb;
  temb.reserve(p * static_cast<std::size_t>(cfg_.time_dim));
  for (Scalar tau : taus) {
    if (!(tau >= 0 && tau <= 1)) throw DomainError("fm head: tau " + std::to_string(tau) + " outside [0, 1]");
    const auto e = time_embedding(tau, cfg_.time_dim);
    temb.insert(temb.end(), e.begin(), e.end());
  }
  Tensor t = Tensor::from({p, static_cast<std::size_t>(cfg_.time_dim)}, std::move(temb));
  Tensor x = ops::concat_cols(tape, {z_tau, t, h});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    x = ops::linear(tape, x, layers_[l].first, layers_[l].second);
    if (l + 1 < layers_.size()) x = ops::gelu(tape, x);
  }
  return x;
}

std::vector<Scalar> FmHead::forward(std::span<const Scalar> z_tau, Scalar tau, std::span<const Scalar> h) const {
  Tape tape(false);
  const Scalar taus[1] = {tau};
  Tensor out = forward(tape, Tensor::from({1, z_tau.size()}, {z_tau.begin(), z_tau.end()}), taus,
                       Tensor::from({1, h.size()}, {h.begin(), h.end()}));
  return {out.values().begin(), out.values().end()};
}

MtpHeads MtpHeads::zeros(int horizons, int vocab, int hidden) {
  MtpHeads m;
  m.horizons = horizons;
  m.vocab = vocab;
  m.hidden = hidden;
  m.weights.assign(static_cast<std::size_t>(horizons), std::vector<double>(static_cast<std::size_t>(vocab * hidden), 0.0));
  m.biases.assign(static_cast<std::size_t>(horizons), std::vector<double>(static_cast<std::size_t>(vocab), 0.0));
  m.reference.assign(static_cast<std::size_t>(vocab), 1.0 / vocab);
  return m;
}

void MtpHeads::validate() const {
  if (horizons < 0 || vocab < 2 || hidden < 1) throw ConfigError("mtp heads: need K >= 0, vocab >= 2, hidden >= 1");
  if (static_cast<int>(weights.size()) != horizons || static_cast<int>(biases.size()) != horizons)
    throw DimensionError("mtp heads: expected one affine map per horizon");
  if (static_cast<int>(reference.size()) != vocab) throw DimensionError("mtp heads: reference has wrong length");
  double total = 0;
  for (double p : reference) {
    if (!(p > 0)) throw DomainError("mtp heads: reference point must lie in the simplex interior");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw DomainError("mtp heads: reference point must sum to 1");
}

std::vector<double> MtpHeads::forward(std::span<const double> h, int k) const {
  if (k < 1 || k > horizons)
    throw DomainError("mtp head index " + std::to_string(k) + " outside 1.." + std::to_string(horizons));
  if (static_cast<int>(h.size()) != hidden) throw DimensionError("mtp head: hidden state has wrong width");
  const auto& w = weights[static_cast<std::size_t>(k - 1)];
  const auto& b = biases[static_cast<std::size_t>(k - 1)];
  std::vector<double> logits(static_cast<std::size_t>(vocab));
  for (int v = 0; v < vocab; ++v) {
    double s = b[static_cast<std::size_t>(v)];
    for (int j = 0; j < hidden; ++j) s += w[static_cast<std::size_t>(v * hidden + j)] * h[static_cast<std::size_t>(j)];
    logits[static_cast<std::size_t>(v)] = s;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (auto& l : logits) z += (l = std::exp(l - mx));
  for (auto& l : logits) l /= z;
  return logits;
}

SFR_END_NAMESPACE
