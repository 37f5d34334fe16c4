#include "sfr/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

SFR_BEGIN_NAMESPACE

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
  return out;
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field num(std::string key, T RunConfig::*member) {
  return {key, [key, member](RunConfig& c, const std::string& v) { c.*member = parse_number<T>(key, v); },
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>)
              return fmt_double(c.*member);
            else
              return std::to_string(c.*member);
          }};
}

template <typename S, typename T>
Field nested(std::string key, S RunConfig::*outer, T S::*member) {
  return {key,
          [key, outer, member](RunConfig& c, const std::string& v) {
            if constexpr (std::is_same_v<T, std::string>)
              (c.*outer).*member = v;
            else
              (c.*outer).*member = parse_number<T>(key, v);
          },
          [outer, member](const RunConfig& c) -> std::string {
            if constexpr (std::is_same_v<T, std::string>)
              return (c.*outer).*member;
            else if constexpr (std::is_floating_point_v<T>)
              return fmt_double((c.*outer).*member);
            else
              return std::to_string((c.*outer).*member);
          }};
}

GatingMode parse_gating(const std::string& s) {
  if (s == "adaptive") return GatingMode::adaptive;
  if (s == "off") return GatingMode::off;
  if (s == "forced") return GatingMode::forced;
  throw ConfigError("config key 'gating': expected adaptive|off|forced, got '" + s + "'");
}

EmaMode parse_ema(const std::string& s) {
  if (s == "assign") return EmaMode::assign;
  if (s == "shadow") return EmaMode::shadow;
  if (s == "off") return EmaMode::off;
  throw ConfigError("config key 'ema_mode': expected assign|shadow|off, got '" + s + "'");
}

TargetSpace parse_target_space(const std::string& s) {
  if (s == "continuous") return TargetSpace::continuous;
  if (s == "simplex") return TargetSpace::simplex;
  throw ConfigError("config key 'target_space': expected continuous|simplex, got '" + s + "'");
}

const std::vector<Field>& fields() {
  using S = Schedule;
  using T = StyleTaskSpec;
  using B = BackboneConfig;
  using F = FmHeadConfig;
  static const std::vector<Field> table = {
      {"method",
       [](RunConfig& c, const std::string& v) {
         if (v != "sfr" && v != "sft") throw ConfigError("config key 'method': expected sfr|sft, got '" + v + "'");
         c.method = v;
       },
       [](const RunConfig& c) { return c.method; }},
      num("seed", &RunConfig::seed),
      nested("steps", &RunConfig::schedule, &S::max_steps),
      nested("batch_size", &RunConfig::schedule, &S::batch_size),
      nested("lr", &RunConfig::schedule, &S::lr),
      nested("fm_lr", &RunConfig::schedule, &S::fm_lr),
      nested("lr_schedule", &RunConfig::schedule, &S::lr_schedule),
      nested("optimizer", &RunConfig::schedule, &S::optimizer),
      nested("beta1", &RunConfig::schedule, &S::beta1),
      nested("beta2", &RunConfig::schedule, &S::beta2),
      nested("adam_eps", &RunConfig::schedule, &S::adam_eps),
      nested("lambda0", &RunConfig::schedule, &S::lambda0),
      nested("warmup_steps", &RunConfig::schedule, &S::warmup_steps),
      nested("ramp_steps", &RunConfig::schedule, &S::ramp_steps),
      nested("ema_decay", &RunConfig::schedule, &S::ema_decay),
      {"ema_mode", [](RunConfig& c, const std::string& v) { c.schedule.ema_mode = parse_ema(v); },
       [](const RunConfig& c) { return to_string(c.schedule.ema_mode); }},
      nested("gate_decay", &RunConfig::schedule, &S::gate_decay),
      nested("gate_gamma", &RunConfig::schedule, &S::gate_gamma),
      {"gating", [](RunConfig& c, const std::string& v) { c.schedule.gating = parse_gating(v); },
       [](const RunConfig& c) { return to_string(c.schedule.gating); }},
      nested("horizon_k", &RunConfig::schedule, &S::horizon),
      nested("stride", &RunConfig::schedule, &S::stride),
      {"sfr_mean",
       [](RunConfig& c, const std::string& v) {
         if (v != "anchors" && v != "all")
           throw ConfigError("config key 'sfr_mean': expected anchors|all, got '" + v + "'");
         c.sfr_all_positions = v == "all";
       },
       [](const RunConfig& c) { return std::string(c.sfr_all_positions ? "all" : "anchors"); }},
      num("virtual_ranks", &RunConfig::virtual_ranks),
      {"geometry", [](RunConfig& c, const std::string& v) { c.geometry = parse_geometry(v); },
       [](const RunConfig& c) { return to_string(c.geometry); }},
      {"source", [](RunConfig& c, const std::string& v) { c.source = parse_source(v); },
       [](const RunConfig& c) { return to_string(c.source); }},
      num("source_value", &RunConfig::source_value),
      {"target_space", [](RunConfig& c, const std::string& v) { c.target_space = parse_target_space(v); },
       [](const RunConfig& c) { return to_string(c.target_space); }},
      nested("task.vocab", &RunConfig::task, &T::vocab_size),
      nested("task.styles", &RunConfig::task, &T::num_styles),
      nested("task.queries", &RunConfig::task, &T::num_queries),
      nested("task.continuations", &RunConfig::task, &T::continuations_per_condition),
      nested("task.response_len", &RunConfig::task, &T::response_len),
      nested("task.query_len", &RunConfig::task, &T::query_len),
      nested("task.seed", &RunConfig::task, &T::seed),
      nested("model.layers", &RunConfig::backbone, &B::layers),
      nested("model.hidden", &RunConfig::backbone, &B::hidden),
      nested("model.heads", &RunConfig::backbone, &B::heads),
      nested("model.seed", &RunConfig::backbone, &B::seed),
      nested("fm.width", &RunConfig::fm, &F::width),
      nested("fm.depth", &RunConfig::fm, &F::depth),
      nested("fm.time_dim", &RunConfig::fm, &F::time_dim),
      nested("fm.seed", &RunConfig::fm, &F::seed),
      num("encoder.d_z", &RunConfig::d_z),
      num("encoder.seed", &RunConfig::encoder_seed),
  };
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

}  // namespace

std::string to_string(GatingMode g) {
  return g == GatingMode::adaptive ? "adaptive" : g == GatingMode::off ? "off" : "forced";
}
std::string to_string(EmaMode e) { return e == EmaMode::assign ? "assign" : e == EmaMode::shadow ? "shadow" : "off"; }
std::string to_string(TargetSpace t) { return t == TargetSpace::continuous ? "continuous" : "simplex"; }

void Schedule::validate() const {
  if (!(lambda0 >= 0)) throw ConfigError("lambda0 must be >= 0");
  if (warmup_steps < 0 || ramp_steps < 0) throw ConfigError("warmup_steps and ramp_steps must be >= 0");
  if (!(ema_decay > 0 && ema_decay < 1)) throw ConfigError("ema_decay must lie in (0, 1)");
  if (!(gate_decay > 0 && gate_decay < 1)) throw ConfigError("gate_decay must lie in (0, 1)");
  if (!(gate_gamma > 1)) throw ConfigError("gate_gamma must be > 1");
  if (horizon < 1) throw ConfigError("horizon_k must be >= 1");
  if (stride < 1) throw ConfigError("stride must be >= 1");
  if (max_steps < 0) throw ConfigError("steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0)) throw ConfigError("lr must be > 0");
  if (lr_schedule != "constant" && lr_schedule != "cosine") throw ConfigError("lr_schedule must be constant or cosine");
  if (optimizer != "adam" && optimizer != "sgd") throw ConfigError("optimizer must be adam or sgd");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0))
    throw ConfigError("adam needs beta1, beta2 in [0, 1) and adam_eps > 0");
}

void RunConfig::finalize() {
  schedule.validate();
  task.validate();
  backbone.vocab = task.vocab_size;
  backbone.max_seq = 1 + task.query_len + task.response_len - 1;
  backbone.validate();
  if (d_z < 1) throw ConfigError("encoder.d_z must be >= 1");
  fm.input_dim = backbone.hidden;
  fm.d_z = d_z;
  fm.validate();
  if (virtual_ranks < 1 || virtual_ranks > schedule.batch_size)
    throw ConfigError("virtual_ranks must lie in 1..batch_size");
  if (target_space == TargetSpace::simplex && geometry != GeometryKind::bregman_kl &&
      geometry != GeometryKind::euclidean)
    throw ConfigError("simplex targets support geometry bregman_kl or euclidean");
  if (target_space == TargetSpace::continuous && geometry == GeometryKind::bregman_kl)
    throw ConfigError("geometry bregman_kl needs target_space = simplex");
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  for (const auto& f : fields()) os << f.key << " = " << f.get(*this) << '\n';
  return os.str();
}

void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown config key '" + key + "'");
  f->set(cfg, value);
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' given twice");
    apply_config_key(cfg, key, trim(line.substr(eq + 1)));
  }
  for (const char* required : {"method", "steps"})
    if (!seen.count(required)) throw ConfigError("missing required config key '" + std::string(required) + "'");
  cfg.finalize();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

SFR_END_NAMESPACE
