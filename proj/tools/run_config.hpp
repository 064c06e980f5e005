#pragma once

// Run configuration for the command-line tool: a YAML (or JSON) file with
// `seed`, `data`, `train` and `eval` sections, overridden by flags and then by
// VLOSS_SEED.

#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "vloss/data/dataset.hpp"
#include "vloss/model/segmenter.hpp"
#include "vloss/train/trainer.hpp"

namespace vloss::cli {

/// Parses YAML text into JSON. Plain scalars become numbers, booleans or
/// null where they parse as such; quoted scalars stay strings.
nlohmann::json yaml_to_json(const std::string& text);

struct DataConfig {
  SynthConfig synth;
  Index heldout_images = 8;

  nlohmann::ordered_json to_json() const;
  static DataConfig from_json(const nlohmann::json& j);
};

struct EvalConfig {
  InferenceConfig inference;
  Index top_k = 100;

  nlohmann::ordered_json to_json() const;
  static EvalConfig from_json(const nlohmann::json& j);
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string seed_source = "default";  // default | config | flag | env
  DataConfig data;
  TrainConfig train;
  EvalConfig eval;

  /// Effective configuration, as copied into every output directory.
  nlohmann::ordered_json to_json() const;
};

/// file <- flag <- VLOSS_SEED. `train.seed` follows the resolved seed.
RunConfig resolve_run_config(const std::optional<std::filesystem::path>& file, std::optional<std::uint64_t> seed_flag);

/// Reads VLOSS_SEED; a non-numeric value is a validation error.
std::optional<std::uint64_t> env_seed();

}  // namespace vloss::cli
