#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "weckd/config.hpp"
#include "weckd/hyperopt.hpp"
#include "weckd/metrics.hpp"
#include "weckd/trainer.hpp"

namespace weckd::run {

using nlohmann::json;

// Files of a run directory.
inline constexpr const char* kCheckpointNames[3] = {"m1.wckd", "m2.wckd", "m3.wckd"};
inline constexpr const char* kMetricsFile = "metrics.json";
inline constexpr const char* kProgressionFile = "chain_progression.csv";
inline constexpr const char* kTimingFile = "timing.csv";
inline constexpr const char* kConfigFile = "config.json";
inline constexpr const char* kStagesFile = "stages.json";
inline constexpr const char* kCurvesFile = "epoch_curves.csv";
inline constexpr const char* kTestIndicesFile = "test_indices.json";
inline constexpr const char* kErrorFile = "error.json";

std::string dataset_name(const config::ExperimentConfig& config);

// Training record of every stage except the weights: epochs, curves,
// digests, hyperparameters and timing.
json stages_json(const ChainResult& chain);

// Everything derivable from the training record plus fresh evaluations.
// Deterministic: no wall-clock values.
json metrics_json(const std::string& dataset, const data::LabeledDataset& ds, const json& stages,
                  const std::array<Evaluation, 3>& test, const std::array<Evaluation, 3>& train);
std::string timing_csv(const json& stages);
std::string curves_csv(const std::string& dataset, const json& stages);

struct RunOutcome {
  ChainResult chain;
  json metrics;
};

// Trains the chain and writes the run directory. On failure error.json is
// written and the exception rethrown.
RunOutcome train_run(const config::ExperimentConfig& config, const std::filesystem::path& out_dir);

// Re-evaluates the checkpoints of `run_dir` under its config snapshot and
// rewrites metrics.json, chain_progression.csv, timing.csv and
// epoch_curves.csv. Returns the metrics.
json render_report(const std::filesystem::path& run_dir, std::size_t threads = 1);

struct TuneOutcome {
  hyperopt::StudyResult study;
  config::ExperimentConfig best_config;
};

// Config with a trial's (eta, alpha, T) applied; T sets the annealing start.
config::ExperimentConfig apply_params(const config::ExperimentConfig& base, const hyperopt::Params& p);

// Objective: validation accuracy of M3 at its best epoch.
TuneOutcome tune(const config::ExperimentConfig& config, std::size_t n_trials, const std::filesystem::path& out_dir);

// Evaluation of a checkpoint on an IDX pair (optionally an index subset).
json evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::filesystem::path& images,
                         const std::filesystem::path& labels, const std::optional<std::filesystem::path>& indices,
                         std::size_t threads = 1);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

// Exit code contract.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// Full command-line entry point; never throws.
int main(int argc, char** argv);

}  // namespace weckd::run
