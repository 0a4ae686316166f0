#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace weckd::hyperopt {

struct Interval {
  double lo = 0.0;
  double hi = 1.0;
  bool log10 = false;  // sampled and modelled in log10 space
};

struct SearchSpace {
  Interval eta{1e-5, 1e-2, true};
  Interval alpha{0.5, 0.9, false};
  Interval temp{1.0, 5.0, false};

  std::array<Interval, 3> dims() const { return {eta, alpha, temp}; }
  void validate() const;
};

struct Params {
  double eta = 1e-3;
  double alpha = 0.7;
  double temp = 5.0;

  std::array<double, 3> values() const { return {eta, alpha, temp}; }
  friend bool operator==(const Params&, const Params&) = default;
};

bool contains(const SearchSpace& space, const Params& p);

enum class TrialStatus { complete, failed };

const char* status_name(TrialStatus status);

struct TrialRecord {
  std::size_t trial_index = 0;
  Params params;
  double objective = 0.0;  // maximised
  TrialStatus status = TrialStatus::complete;
  std::optional<double> generalization_gap;  // logged only, never optimised
  std::string error;
};

struct TpeOptions {
  std::size_t n_startup = 2;
  double gamma = 0.25;
  std::size_t n_candidates = 24;
  double min_bandwidth_fraction = 0.01;

  void validate() const;
};

struct Suggestion {
  Params params;
  std::optional<std::string> warning;
};

// Uniform draws until `n_startup` trials completed, then independent
// per-dimension Parzen estimates over the good (top gamma) and bad trials;
// each dimension takes the candidate drawn from l with the largest l/g.
Suggestion suggest(std::span<const TrialRecord> history, const SearchSpace& space, std::uint64_t trial_seed,
                   const TpeOptions& options = {});

// Thrown when a study ends with no completed trial.
class StudyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ObjectiveValue {
  double objective = 0.0;
  std::optional<double> generalization_gap;
};

// A non-finite objective or an exception marks the trial failed.
using Objective = std::function<ObjectiveValue(const Params&, std::size_t trial_index)>;

struct StudyResult {
  TrialRecord best;
  std::vector<TrialRecord> trials;
  std::vector<std::string> warnings;
};

StudyResult run_study(const Objective& objective, const SearchSpace& space, std::size_t n_trials,
                      std::uint64_t seed, const TpeOptions& options = {});

// Columns: trial_index, eta, alpha, temp, objective, status.
std::string trials_csv(std::span<const TrialRecord> trials);
void write_trials_csv(const std::filesystem::path& path, std::span<const TrialRecord> trials);

}  // namespace weckd::hyperopt
