#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "supici/adapt.hpp"
#include "supici/data.hpp"
#include "supici/detector.hpp"

namespace supici::config {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EvalConfig {
  int max_detections = 64;
  double min_score = 0.0;
};

/// One JSON file drives every command; flags may override top-level keys.
/// Optimizer, batch, and patch geometry live under "detector" and apply to
/// source training and both adaptation steps alike.
struct RunConfig {
  std::uint64_t seed = 17;
  std::string out_dir = "runs/out";
  int workers = 2;

  int scans_per_domain = 20;
  data::SynthDomainSpec source;
  data::SynthDomainSpec target;

  int source_epochs = 40;
  double init_scale = 1.0;
  int source_rpn_neg_base = 0;  // source training sees every negative anchor
  int source_rpn_neg_pos_ratio = 8;

  adapt::AdaptConfig adapt;  // also carries lr/momentum/wd/batch/patch settings
  EvalConfig eval;

  detector::TrainConfig train_config() const;
  detector::InferConfig infer_config() const;

  void validate() const;  // throws ConfigError
};

RunConfig default_config();

/// Strict load: unknown keys anywhere are rejected, values validated.
RunConfig load_config(const std::filesystem::path& path);

/// Deterministic JSON snapshot of the effective configuration.
std::string config_snapshot(const RunConfig& cfg);

struct KeyDoc {
  std::string key;
  std::string text;
};

/// Documentation for every configuration key, including the reference value
/// of each method hyperparameter; rendered by `--help`.
const std::vector<KeyDoc>& config_key_docs();
std::string render_key_docs();

}  // namespace supici::config
