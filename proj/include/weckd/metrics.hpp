#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "weckd/tensor.hpp"
#include "weckd/trainer.hpp"

namespace weckd::metrics {

// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  std::size_t num_classes = 0;
  std::vector<std::uint64_t> counts;

  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * num_classes + pred]; }
  std::uint64_t total() const;
  std::uint64_t trace() const;
};

ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> labels,
                                 std::size_t num_classes);

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::uint64_t support = 0;  // true samples of the class
};

struct Prf1 {
  std::vector<ClassScores> per_class;
  ClassScores macro;     // unweighted class mean
  ClassScores weighted;  // support-weighted class mean
  double accuracy = 0.0;
};

// Any zero denominator yields 0 for that metric.
Prf1 prf1(const ConfusionMatrix& matrix);

// 1 - accuracy.
double classification_error(const ConfusionMatrix& matrix);

struct AucTable {
  std::vector<std::optional<double>> per_class;  // empty when a class has no positive or no negative
  std::optional<double> macro;                   // mean over the defined classes
};

// One-vs-rest Mann-Whitney AUC scored by column c of `scores` ([N,K]); ties
// count one half.
AucTable roc_auc_ovr(const Tensor& scores, std::span<const int> labels);

struct TheoryReport {
  std::array<double, 3> risks{};        // 0-1 risk on d_test
  std::array<double, 3> train_errors{};  // on each stage's own training subset
  std::array<double, 3> gaps{};         // risk - train error
  double kl_21 = 0.0;                   // mean KL(p_M2 || p_M1) over d_test, T = 1
  double kl_32 = 0.0;                   // mean KL(p_M3 || p_M2)
  // mean |z3 - z2|_1 / mean |z2 - z1|_1; empty when the denominator is 0.
  std::optional<double> beta;
  bool hierarchy_holds = false;  // R3 <= R2 <= R1
};

// Inputs are per-stage evaluations in chain order; anything but three stages
// is a ContractError.
TheoryReport theory_report(std::span<const Evaluation> test, std::span<const Evaluation> train);

TheoryReport theory_report(std::span<const Model> models, const data::LabeledDataset& dataset,
                           const data::DatasetSplit& split, std::span<const std::vector<std::size_t>> train_indices,
                           std::size_t threads = 1);

// Mean over rows of KL(softmax(p_logits) || softmax(q_logits)).
double mean_kl(const Tensor& p_logits, const Tensor& q_logits);

nlohmann::json to_json(const ConfusionMatrix& m);
nlohmann::json to_json(const Prf1& r, std::span<const std::string> class_names);
nlohmann::json to_json(const AucTable& t, std::span<const std::string> class_names);
nlohmann::json to_json(const TheoryReport& r);

// Overall, per-class, AUC and confusion blocks for one evaluation.
nlohmann::json evaluation_json(const Evaluation& ev, std::span<const std::string> class_names);

inline constexpr std::array<const char*, 3> kStageNames{"M1", "M1->M2", "M2->M3"};

// Columns: dataset, stage, train_acc, test_acc, train_loss, test_loss, delta_prev.
std::string chain_progression_csv(const std::string& dataset_name, std::span<const StageMetrics> progression);

}  // namespace weckd::metrics
