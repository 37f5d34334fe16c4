#pragma once

#include <map>
#include <string>
#include <vector>

#include "sfr/config.hpp"
#include "sfr/model.hpp"

SFR_BEGIN_NAMESPACE

struct ManifestEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;  // bytes into the payload
};

/// Text header of a checkpoint file. The payload that follows is the
/// concatenation of all entries as little-endian 32-bit floats.
struct CheckpointManifest {
  std::string variant;  // published | resume
  int step = 0;
  std::uint64_t rng_seed = 0;  // counter streams are keyed by (seed, step, ...)
  std::string config_text;
  std::map<std::string, std::string> state;  // scalar trainer state (resume only)
  std::vector<ManifestEntry> entries;

  bool has_prefix(const std::string& prefix) const;
};

struct CheckpointData {
  CheckpointManifest manifest;
  std::map<std::string, std::vector<float>> tensors;

  const std::vector<float>& tensor(const std::string& name) const;
};

struct NamedBuffer {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// Writes atomically through a temporary file; a failed write leaves no
/// partial file behind.
void write_checkpoint(const std::string& path, CheckpointManifest manifest, const std::vector<NamedBuffer>& buffers);
CheckpointData read_checkpoint(const std::string& path);

/// Rebuilds the deployable model (backbone + LM head) from either variant.
LanguageModel load_language_model(const std::string& path, RunConfig* config_out = nullptr);

SFR_END_NAMESPACE
