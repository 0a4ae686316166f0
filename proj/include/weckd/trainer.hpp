#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "weckd/backbone.hpp"
#include "weckd/data.hpp"
#include "weckd/distill_loss.hpp"

namespace weckd {

// How M2 and M3 are initialised before their own training.
enum class StudentInit {
  shared_base,  // the same seeded f_base as M1, plus the teacher's attention weights
  inherit,      // a copy of the teacher's trained parameters
};

std::string student_init_name(StudentInit init);

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 50;
  std::size_t patience = 10;
  double lr_decay_factor = 0.1;
  std::size_t lr_patience = 5;
  std::size_t max_lr_decays = 3;
  double momentum = 0.0;
  distill::DistillParams distill;
  std::array<bool, 3> stage_attention{false, true, true};
  // Temperature annealing per distillation stage (M2, M3). A stage without
  // annealing distils at t_max throughout.
  std::array<bool, 2> anneal_stages{true, true};
  StudentInit student_init = StudentInit::shared_base;
  double validation_fraction = 0.1;
  std::vector<data::AugmentOp> augment;
  std::uint64_t seed = 0;
  std::size_t eval_threads = 1;

  // Throws ConfigError naming the offending "train.*" or "distill.*" key.
  void validate() const;
};

struct SchedulerDecision {
  double learning_rate = 0.0;
  bool stop = false;
  bool decayed = false;
};

inline constexpr double kMinImprovement = 1e-6;

// Plateau learning-rate decay and early stopping, fed one validation loss per
// epoch. An epoch improves when its loss is below the best so far by at least
// kMinImprovement.
class PlateauScheduler {
 public:
  PlateauScheduler(double initial_lr, const TrainConfig& cfg);

  SchedulerDecision observe(double val_loss);

  double learning_rate() const noexcept { return lr_; }
  std::size_t decays() const noexcept { return decays_; }
  double best() const noexcept { return best_; }

 private:
  double lr_;
  double decay_factor_;
  std::size_t patience_, lr_patience_, max_decays_;
  double best_ = 0.0;
  bool has_best_ = false;
  std::size_t since_best_ = 0;
  std::size_t since_decay_or_best_ = 0;
  std::size_t decays_ = 0;
};

// Replays `history` through a fresh scheduler starting at `initial_lr`.
SchedulerDecision scheduler_step(std::span<const double> history, double initial_lr, const TrainConfig& cfg);

struct EpochRecord {
  double train_loss = 0.0;  // mean stage objective over the epoch's batches
  double train_acc = 0.0;
  double val_loss = 0.0;  // cross-entropy on the stage's validation subset
  double val_acc = 0.0;
  double learning_rate = 0.0;
  double temperature = 0.0;
  std::string digest;  // SHA-256 of the f32-rounded parameters after this epoch
};

struct StageHyperparams {
  double learning_rate = 0.0;
  double alpha = 1.0;
  double t_max = 1.0;
  double t_min = 1.0;
  bool annealed = false;
  bool attention = false;
};

struct StageResult {
  Model model;  // best-validation-loss parameters, rounded to f32
  std::vector<EpochRecord> epoch_curves;
  std::size_t stopped_epoch = 0;  // epochs actually run
  std::size_t best_epoch = 0;     // 0-based index into epoch_curves
  std::size_t steps_per_epoch = 0;
  double ms_per_step = 0.0;
  std::size_t lr_decays = 0;
  StageHyperparams hyperparams;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> val_indices;
  std::optional<std::string> teacher_digest_before;
  std::optional<std::string> teacher_digest_after;
  std::vector<std::string> warnings;
};

struct Evaluation {
  Tensor logits;  // [N,K]
  Tensor probs;   // [N,K], T = 1
  std::vector<int> predictions;
  std::vector<int> labels;
  double accuracy = 0.0;
  double loss = 0.0;  // mean cross-entropy
};

// Pure inference over `indices`, split across `threads` workers. Results do
// not depend on the thread count.
Evaluation evaluate_model(const Model& model, const data::LabeledDataset& dataset,
                          std::span<const std::size_t> indices, std::size_t batch_size = 64,
                          std::size_t threads = 1);

// Rounds every parameter to the nearest f32 value.
void quantize_to_f32(ParameterSet& params);

StageResult train_stage1(Model model, std::span<const std::size_t> subset, const data::LabeledDataset& dataset,
                         const TrainConfig& cfg);

// `stage_index` is 2 or 3. The teacher is only read; its digest is compared
// before and after and a mismatch is a fatal logic_error.
StageResult train_distill_stage(Model student, const Model& teacher, std::span<const std::size_t> subset,
                                const data::LabeledDataset& dataset, const TrainConfig& cfg, int stage_index);

struct StageMetrics {
  double train_acc = 0.0;
  double test_acc = 0.0;
  double train_loss = 0.0;
  double test_loss = 0.0;
};

struct ChainResult {
  std::array<StageResult, 3> stages;
  std::array<StageMetrics, 3> progression;
  std::array<Evaluation, 3> test_evaluations;
  std::array<Evaluation, 3> train_evaluations;

  // Test-accuracy differences, recomputed from `progression`.
  double delta_12() const { return progression[1].test_acc - progression[0].test_acc; }
  double delta_23() const { return progression[2].test_acc - progression[1].test_acc; }
  double delta_13() const { return progression[2].test_acc - progression[0].test_acc; }
};

// Base for M1: a seeded build, or the warm-start checkpoint if given.
Model make_base_model(const BackboneConfig& config, const std::optional<Model>& warm_start);

ChainResult run_chain(const data::LabeledDataset& dataset, const data::DatasetSplit& split,
                      const BackboneConfig& backbone, const TrainConfig& cfg,
                      const std::optional<Model>& warm_start = std::nullopt);

struct SingleModelResult {
  StageResult stage;
  Evaluation test;
  StageMetrics metrics;
};

// One backbone trained on d1 + d2 + d3 with the stage-1 recipe and the
// attention setting of the final chain stage.
SingleModelResult train_single_model(const data::LabeledDataset& dataset, const data::DatasetSplit& split,
                                     const BackboneConfig& backbone, const TrainConfig& cfg,
                                     const std::optional<Model>& warm_start = std::nullopt);

}  // namespace weckd
