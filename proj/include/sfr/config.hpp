#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "sfr/model.hpp"
#include "sfr/objective.hpp"
#include "sfr/synthetic.hpp"

SFR_BEGIN_NAMESPACE

enum class GatingMode { adaptive, off, forced };
enum class EmaMode { assign, shadow, off };
enum class TargetSpace { continuous, simplex };

/// Every knob of the training algorithm.
struct Schedule {
  double lambda0 = 0.2;
  int warmup_steps = 200;  // T_h, phase A length
  int ramp_steps = 300;    // T_l
  double ema_decay = 0.999;
  EmaMode ema_mode = EmaMode::assign;
  double gate_decay = 0.9;  // mu_g
  double gate_gamma = 1.2;
  GatingMode gating = GatingMode::adaptive;
  int horizon = 32;  // k
  int stride = 1;    // s
  int max_steps = 1000;
  double lr = 1e-3;
  double fm_lr = 0;  // 0 -> lr
  std::string lr_schedule = "constant";  // constant | cosine
  int batch_size = 8;
  std::string optimizer = "adam";  // adam | sgd
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
  double resolved_fm_lr() const { return fm_lr > 0 ? fm_lr : lr; }
};

struct RunConfig {
  std::string method = "sfr";  // sfr | sft
  std::uint64_t seed = 1;
  Schedule schedule;
  StyleTaskSpec task;
  BackboneConfig backbone;
  FmHeadConfig fm;
  int d_z = 32;
  std::uint64_t encoder_seed = 7;
  GeometryKind geometry = GeometryKind::euclidean;
  SourceKind source = SourceKind::gaussian;
  double source_value = 0;
  TargetSpace target_space = TargetSpace::continuous;
  bool sfr_all_positions = false;  // false: mean over the anchor set
  int virtual_ranks = 1;

  bool uses_aux() const { return method == "sfr"; }
  /// Fills derived fields (vocab, sequence length, head widths) and checks
  /// every invariant.
  void finalize();
  std::string to_text() const;
};

/// Flat `key = value` text; `#` starts a comment. Unknown keys and missing
/// required keys (`method`, `steps`) are reported by name.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
/// Applies one `key=value` override to an existing config.
void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value);

std::string to_string(GatingMode g);
std::string to_string(EmaMode e);
std::string to_string(TargetSpace t);

SFR_END_NAMESPACE
