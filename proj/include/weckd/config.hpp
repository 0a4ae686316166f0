#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "weckd/backbone.hpp"
#include "weckd/data.hpp"
#include "weckd/trainer.hpp"

namespace weckd::config {

using nlohmann::json;

struct IdxSource {
  std::string images;
  std::string labels;
  friend bool operator==(const IdxSource&, const IdxSource&) = default;
};

struct PartitionConfig {
  std::uint64_t seed = 0;
  bool stratified = false;
  friend bool operator==(const PartitionConfig&, const PartitionConfig&) = default;
};

struct HyperoptConfig {
  bool enabled = false;
  std::size_t n_trials = 5;
  std::uint64_t seed = 0;
  friend bool operator==(const HyperoptConfig&, const HyperoptConfig&) = default;
};

struct ExperimentConfig {
  // Exactly one source is set.
  std::optional<data::SyntheticSpec> synthetic;
  std::optional<IdxSource> idx;
  PartitionConfig partition;
  BackboneConfig backbone;
  std::optional<std::string> warm_start;
  TrainConfig train;
  HyperoptConfig hyperopt;
  std::string output_dir = "runs/default";
  std::vector<std::uint64_t> repeat_seeds;
};

bool operator==(const TrainConfig& a, const TrainConfig& b);
bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

json to_json(const BackboneConfig& c);
json to_json(const TrainConfig& c);
json to_json(const ExperimentConfig& c);

// Strict: unknown keys, wrong types and invariant violations throw
// ConfigError naming the JSON path. Absent keys take their defaults.
BackboneConfig backbone_from_json(const json& j, const std::string& path = "backbone");
TrainConfig train_from_json(const json& train, const json* distill);
ExperimentConfig experiment_from_json(const json& j);

ExperimentConfig parse_config(const std::filesystem::path& path);
ExperimentConfig parse_config_text(const std::string& text);

// Copy of `base` with the seeds of partition, backbone init and training
// replaced by `seed`.
ExperimentConfig with_seed(const ExperimentConfig& base, std::uint64_t seed);

data::LabeledDataset load_dataset(const ExperimentConfig& config);

}  // namespace weckd::config
