#pragma once

// Run configuration files: a single JSON document with strict schema
// validation (unknown keys are rejected) whose defaults are the full
// training recipe, so every knob is visible and overridable in one place.
//
//   {
//     "model": { "variant": "proposed", "base_channels": 16, ... },
//     "train": { "lr": 5e-4, "epochs": 500, "plateau_patience": 10, ... },
//     "data":  { "type": "synthetic", "num_cases": 20, "dims": [32,32,32] }
//              or { "type": "manifest", "manifest": "cases.json" }
//   }

#include <array>
#include <cstdint>
#include <string>

#include "voxseg/trainer.hpp"

namespace voxseg {

struct DataConfig {
  std::string type;  // "synthetic" | "manifest"; empty = section absent
  // synthetic
  int num_cases = 20;
  Shape dims{32, 32, 32};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  double noise_std = 0.05;
  std::uint64_t seed = 0;
  // manifest
  std::string manifest;
};

struct RunConfig {
  TrainConfig train;  // carries the nested ModelConfig
  DataConfig data;
};

/// Recipe defaults with no data section.
RunConfig default_run_config();

/// Parse and validate a config document. Unknown keys anywhere raise
/// ConfigError naming the key; so do out-of-range values.
RunConfig parse_run_config(const std::string& json_text);

/// Read and parse a config file (DataError if unreadable).
RunConfig load_run_config(const std::string& path);

/// Effective-config snapshot: serializes every field, defaults included.
/// parse_run_config(dump_run_config(c)) reproduces c.
std::string dump_run_config(const RunConfig& config);

}  // namespace voxseg
