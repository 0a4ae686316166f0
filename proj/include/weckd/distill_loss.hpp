#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>

#include "weckd/tensor.hpp"

namespace weckd::distill {

// Mixing weight, temperature schedule bounds and schedule length for one
// distillation stage.
struct DistillParams {
  double alpha = 0.7;
  double t_max = 5.0;
  double t_min = 1.0;
  int total_epochs = 50;
  // Scale the distillation gradient by T^2 (classical compensation). Off by
  // default: the objective is used exactly as written.
  bool t_squared = false;

  void validate() const;
};

inline constexpr double kLogClamp = 1e-12;

Tensor softmax_temperature(const Tensor& logits, double temperature);

Tensor one_hot(std::span<const int> labels, std::size_t num_classes);

// Mean over the batch of -sum_c y_c log max(p_c, 1e-12). `targets` must be one-hot.
double ce_loss(const Tensor& probs, const Tensor& targets);

// Mean over the batch of KL(p_teacher,T || p_student,T).
double kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature);

struct HybridLoss {
  double total = 0.0;
  double ce_part = 0.0;
  double kd_part = 0.0;
};

// alpha * CE(softmax(z_s), y) + (1 - alpha) * KD(z_s, z_t, T). With alpha == 1
// the teacher may be absent.
HybridLoss hybrid_loss(const Tensor& student_logits, const Tensor* teacher_logits,
                       const Tensor& targets, double alpha, double temperature);

// d total / d student_logits, closed form.
Tensor hybrid_loss_grad(const Tensor& student_logits, const Tensor* teacher_logits,
                        const Tensor& targets, double alpha, double temperature,
                        bool t_squared = false);

struct AnnealResult {
  double temperature = 0.0;
  std::optional<std::string> warning;
};

// T(e) = T_max - (T_max - T_min) * e / E; e > E clamps to T_min with a warning.
AnnealResult anneal_temperature(int epoch, int total_epochs, double t_max, double t_min);

}  // namespace weckd::distill
