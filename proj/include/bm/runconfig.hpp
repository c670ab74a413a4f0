#pragma once

// Run configuration file: an INI-style key-value format with [model],
// [train], [bench], and [paths] sections plus a top-level seed. Parsing is
// strict: unknown keys are fatal and the error names the key, the line, and
// the nearest known key.

#include <string>
#include <vector>

#include "bm/model.hpp"
#include "bm/train.hpp"

namespace bm {

struct BenchOptions {
  std::vector<i64> lengths = {128, 512, 2048};
  int repeats = 5;
  int warmup = 3;
  int window = 32;  // positions averaged per target length

  void validate() const {
    if (lengths.empty()) throw ConfigError("bench lengths must not be empty");
    i64 prev = 0;
    for (i64 l : lengths) {
      if (l <= prev) throw ConfigError("bench lengths must be positive and strictly increasing");
      prev = l;
    }
    if (repeats < 1) throw ConfigError(strcat("bench repeats must be >= 1, got ", repeats));
    if (warmup < 0) throw ConfigError(strcat("bench warmup must be >= 0, got ", warmup));
    if (window < 1) throw ConfigError(strcat("bench window must be >= 1, got ", window));
  }
};

struct RunPaths {
  std::string checkpoint_dir = "checkpoints";
  std::string metrics_dir = "metrics";
};

struct RunConfig {
  u64 seed = 0;
  ModelConfig model;
  bool has_train = false;
  TrainConfig train;
  BenchOptions bench;
  RunPaths paths;
};

RunConfig parse_config(const std::string& path);
RunConfig parse_config_text(const std::string& text, const std::string& filename);

// Environment overrides, paths only: BM_CHECKPOINT_DIR, BM_METRICS_DIR.
void apply_env_overrides(RunConfig& cfg);

}  // namespace bm
