#include "sfr/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sfr/trainer.hpp"

SFR_BEGIN_NAMESPACE

namespace {

constexpr const char* kMagic = "SFRCKPT 1";

std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double parse_hexfloat(const std::string& s) { return std::strtod(s.c_str(), nullptr); }

std::string shape_text(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

Shape parse_shape(const std::string& s) {
  Shape out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, 'x')) out.push_back(std::stoul(part));
  return out;
}

void put_le(std::ostream& os, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  const unsigned char b[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                              static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

float get_le(const unsigned char* b) {
  const std::uint32_t u = std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
                          std::uint32_t(b[3]) << 24;
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

std::vector<float> to_floats(std::span<const Scalar> v) { return {v.begin(), v.end()}; }

void load_into(const CheckpointData& data, ParameterSet& params, const std::string& prefix = "") {
  for (auto& [name, t] : params.entries()) {
    const auto& src = data.tensor(prefix + name);
    auto dst = t.mutable_values();
    if (src.size() != dst.size()) throw IoError("checkpoint entry " + prefix + name + " has the wrong size");
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

const std::string& state_value(const CheckpointManifest& m, const std::string& key) {
  const auto it = m.state.find(key);
  if (it == m.state.end()) throw IoError("resume checkpoint lacks state '" + key + "'");
  return it->second;
}

}  // namespace

bool CheckpointManifest::has_prefix(const std::string& prefix) const {
  for (const auto& e : entries)
    if (e.name.rfind(prefix, 0) == 0) return true;
  return false;
}

const std::vector<float>& CheckpointData::tensor(const std::string& name) const {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw IoError("checkpoint has no entry '" + name + "'");
  return it->second;
}

void write_checkpoint(const std::string& path, CheckpointManifest manifest, const std::vector<NamedBuffer>& buffers) {
  manifest.entries.clear();
  std::uint64_t offset = 0;
  for (const auto& b : buffers) {
    if (shape_numel(b.shape) != b.values.size()) throw DimensionError("checkpoint buffer " + b.name + " shape mismatch");
    manifest.entries.push_back({b.name, b.shape, offset});
    offset += 4 * b.values.size();
  }
  const std::string tmp = path + ".partial";
  try {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp + " for writing");
    os << kMagic << '\n';
    os << "variant " << manifest.variant << '\n';
    os << "step " << manifest.step << '\n';
    os << "rng " << manifest.rng_seed << ' ' << manifest.step << '\n';
    for (const auto& [k, v] : manifest.state) os << "state " << k << ' ' << v << '\n';
    std::size_t lines = 0;
    for (char c : manifest.config_text) lines += c == '\n';
    os << "config " << lines << '\n' << manifest.config_text;
    os << "entries " << manifest.entries.size() << '\n';
    for (const auto& e : manifest.entries) os << e.name << ' ' << shape_text(e.shape) << ' ' << e.offset << '\n';
    os << "payload " << offset << '\n';
    for (const auto& b : buffers)
      for (float f : b.values) put_le(os, f);
    os.flush();
    if (!os) throw IoError("write to " + tmp + " failed");
    os.close();
    std::filesystem::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    std::filesystem::remove(tmp, ec);
    throw;
  }
}

CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  CheckpointData data;
  auto& m = data.manifest;
  std::string line, word;
  auto expect = [&](const std::string& key) {
    if (!std::getline(is, line)) throw IoError(path + ": truncated header, expected '" + key + "'");
    std::istringstream ls(line);
    ls >> word;
    if (word != key) throw IoError(path + ": expected '" + key + "', found '" + word + "'");
    std::string rest;
    std::getline(ls, rest);
    return rest.empty() ? rest : rest.substr(1);
  };
  if (!std::getline(is, line) || line != kMagic) throw IoError(path + " is not an sfr checkpoint");
  m.variant = expect("variant");
  m.step = std::stoi(expect("step"));
  {
    std::istringstream rs(expect("rng"));
    rs >> m.rng_seed;
  }
  while (is.peek() == 's') {
    std::istringstream ls(expect("state"));
    std::string k, v;
    ls >> k >> v;
    m.state[k] = v;
  }
  const int config_lines = std::stoi(expect("config"));
  for (int i = 0; i < config_lines; ++i) {
    if (!std::getline(is, line)) throw IoError(path + ": truncated config block");
    m.config_text += line + '\n';
  }
  const int entries = std::stoi(expect("entries"));
  for (int i = 0; i < entries; ++i) {
    if (!std::getline(is, line)) throw IoError(path + ": truncated entry table");
    std::istringstream ls(line);
    ManifestEntry e;
    std::string shape;
    ls >> e.name >> shape >> e.offset;
    e.shape = parse_shape(shape);
    m.entries.push_back(std::move(e));
  }
  const auto payload = std::stoull(expect("payload"));
  std::vector<unsigned char> bytes(payload);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(payload));
  if (static_cast<std::uint64_t>(is.gcount()) != payload) throw IoError(path + ": payload truncated");
  for (const auto& e : m.entries) {
    const std::size_t n = shape_numel(e.shape);
    if (e.offset + 4 * n > payload) throw IoError(path + ": entry " + e.name + " exceeds the payload");
    std::vector<float> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = get_le(bytes.data() + e.offset + 4 * i);
    data.tensors.emplace(e.name, std::move(v));
  }
  return data;
}

LanguageModel load_language_model(const std::string& path, RunConfig* config_out) {
  const auto data = read_checkpoint(path);
  RunConfig cfg = parse_config(data.manifest.config_text);
  LanguageModel model(cfg.backbone);
  auto params = model.parameters();
  load_into(data, params);
  if (config_out) *config_out = cfg;
  return model;
}

// Trainer serialization lives here so the trainer itself stays format-agnostic.
struct CheckpointAccess {
  static void save(const Trainer& tr, const std::string& path, bool published) {
    CheckpointManifest m;
    m.variant = published ? "published" : "resume";
    m.step = tr.step_;
    m.rng_seed = tr.cfg_.seed;
    m.config_text = tr.cfg_.to_text();
    std::vector<NamedBuffer> bufs;
    auto add_set = [&](const ParameterSet& ps, const std::string& prefix) {
      for (const auto& [name, t] : ps.entries()) bufs.push_back({prefix + name, t.shape(), to_floats(t.values())});
    };
    auto add_opt = [&](const Optimizer& opt, const ParameterSet& ps, const std::string& prefix) {
      const auto& e = ps.entries();
      for (std::size_t i = 0; i < e.size(); ++i) {
        bufs.push_back({prefix + ".m/" + e[i].first, e[i].second.shape(), to_floats(opt.m[i])});
        if (!opt.v[i].empty()) bufs.push_back({prefix + ".v/" + e[i].first, e[i].second.shape(), to_floats(opt.v[i])});
      }
      m.state[prefix + ".t"] = std::to_string(opt.t);
    };
    const ParameterSet theta = tr.theta();
    add_set(theta, "");
    if (!published) {
      const ParameterSet phi = tr.phi();
      add_set(phi, "");
      bufs.push_back({"encoder.projection",
                      {tr.encoder_.projection().size() / static_cast<std::size_t>(tr.encoder_.d_z()),
                       static_cast<std::size_t>(tr.encoder_.d_z())},
                      tr.encoder_.projection()});
      add_opt(tr.opt_theta_, theta, "adam.theta");
      if (tr.cfg_.uses_aux()) add_opt(tr.opt_phi_, phi, "adam.phi");
      if (tr.ema_initialized_) {
        const auto& e = phi.entries();
        for (std::size_t i = 0; i < e.size(); ++i)
          bufs.push_back({"ema/" + e[i].first, e[i].second.shape(), to_floats(tr.ema_[i])});
      }
      m.state["ema.initialized"] = tr.ema_initialized_ ? "1" : "0";
      m.state["gating.running"] = hexfloat(tr.gating_.running);
      m.state["gating.initialized"] = tr.gating_.initialized ? "1" : "0";
      m.state["gating.last"] = tr.gating_.last_gated ? "1" : "0";
    }
    write_checkpoint(path, std::move(m), bufs);
  }

  static Trainer resume(const std::string& path) {
    const auto data = read_checkpoint(path);
    const auto& m = data.manifest;
    if (m.variant != "resume")
      throw StateError(path + " is a published checkpoint: it carries only the backbone and LM head, so training "
                              "state and the flow-matching head cannot be restored from it");
    Trainer tr(parse_config(m.config_text));
    if (tr.cfg_.seed != m.rng_seed) throw IoError(path + ": rng seed disagrees with the config block");
    auto theta = tr.theta();
    auto phi = tr.phi();
    load_into(data, theta);
    load_into(data, phi);
    if (data.tensor("encoder.projection") != tr.encoder_.projection())
      throw IoError(path + ": stored encoder differs from the one regenerated from encoder.seed");
    auto load_opt = [&](Optimizer& opt, const ParameterSet& ps, const std::string& prefix) {
      const auto& e = ps.entries();
      for (std::size_t i = 0; i < e.size(); ++i) {
        const auto& mv = data.tensor(prefix + ".m/" + e[i].first);
        opt.m[i].assign(mv.begin(), mv.end());
        if (!opt.v[i].empty()) {
          const auto& vv = data.tensor(prefix + ".v/" + e[i].first);
          opt.v[i].assign(vv.begin(), vv.end());
        }
      }
      opt.t = std::stoll(state_value(m, prefix + ".t"));
    };
    load_opt(tr.opt_theta_, theta, "adam.theta");
    if (tr.cfg_.uses_aux()) load_opt(tr.opt_phi_, phi, "adam.phi");
    tr.ema_initialized_ = state_value(m, "ema.initialized") == "1";
    if (tr.ema_initialized_) {
      tr.ema_.clear();
      for (const auto& [name, t] : phi.entries()) {
        const auto& v = data.tensor("ema/" + name);
        tr.ema_.emplace_back(v.begin(), v.end());
      }
    }
    tr.gating_.running = parse_hexfloat(state_value(m, "gating.running"));
    tr.gating_.initialized = state_value(m, "gating.initialized") == "1";
    tr.gating_.last_gated = state_value(m, "gating.last") == "1";
    tr.step_ = m.step;
    return tr;
  }
};

void Trainer::save(const std::string& path, bool published) const { CheckpointAccess::save(*this, path, published); }

Trainer Trainer::resume(const std::string& path) { return CheckpointAccess::resume(path); }

SFR_END_NAMESPACE
