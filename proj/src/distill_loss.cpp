#include "weckd/distill_loss.hpp"

#include <algorithm>
#include <cmath>

#include "weckd/errors.hpp"
#include "weckd/layers.hpp"

namespace weckd::distill {

void DistillParams::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("alpha must lie in [0, 1], got " + std::to_string(alpha), "distill.alpha");
  }
  if (!(t_min >= 1.0)) {
    throw ConfigError("t_min must be >= 1, got " + std::to_string(t_min), "distill.t_min");
  }
  if (!(t_max >= t_min && t_max <= 10.0)) {
    throw ConfigError("t_max must lie in [t_min, 10], got " + std::to_string(t_max),
                      "distill.t_max");
  }
  if (total_epochs < 1) {
    throw ConfigError("total epochs must be positive", "train.max_epochs");
  }
}

Tensor softmax_temperature(const Tensor& logits, double temperature) {
  if (!(temperature > 0.0)) {
    throw ContractError("softmax temperature must be positive, got " + std::to_string(temperature));
  }
  return layers::softmax_rows(logits, temperature);
}

Tensor one_hot(std::span<const int> labels, std::size_t num_classes) {
  Tensor y({labels.size(), num_classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw ContractError("label " + std::to_string(labels[i]) + " outside [0, " +
                          std::to_string(num_classes) + ")");
    }
    y.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return y;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 2 || a.dims() != b.dims()) {
    throw ContractError(std::string(what) + ": shapes differ or are not [B,K]: " +
                        a.shape_string() + " vs " + b.shape_string());
  }
}

void require_one_hot(const Tensor& y) {
  const std::size_t rows = y.dim(0), k = y.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t ones = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const double v = y.at(r, c);
      if (v == 1.0) {
        ++ones;
      } else if (v != 0.0) {
        ones = 2;
        break;
      }
    }
    if (ones != 1) throw ContractError("targets row " + std::to_string(r) + " is not one-hot");
  }
}

}  // namespace

double ce_loss(const Tensor& probs, const Tensor& targets) {
  require_same_shape(probs, targets, "ce_loss");
  require_one_hot(targets);
  const std::size_t rows = probs.dim(0), k = probs.dim(1);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < k; ++c) {
      if (targets.at(r, c) != 0.0) total -= std::log(std::max(probs.at(r, c), kLogClamp));
    }
  }
  return total / static_cast<double>(rows);
}

namespace {

// log softmax(z / T) row-wise, max-subtracted.
Tensor log_softmax_temperature(const Tensor& logits, double temperature) {
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  Tensor out(logits.dims());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = logits.raw() + r * k;
    double* o = out.raw() + r * k;
    double top = z[0];
    for (std::size_t c = 1; c < k; ++c) top = std::max(top, z[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      o[c] = (z[c] - top) / temperature;
      total += std::exp(o[c]);
    }
    const double log_total = std::log(total);
    for (std::size_t c = 0; c < k; ++c) o[c] -= log_total;
  }
  return out;
}

}  // namespace

double kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  require_same_shape(student_logits, teacher_logits, "kd_loss (teacher/student class count)");
  if (!(temperature > 0.0)) {
    throw ContractError("kd_loss temperature must be positive, got " + std::to_string(temperature));
  }
  const Tensor log_ps = log_softmax_temperature(student_logits, temperature);
  const Tensor log_pt = log_softmax_temperature(teacher_logits, temperature);
  const std::size_t rows = log_pt.dim(0), K = log_pt.dim(1);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double kl = 0.0;
    for (std::size_t i = r * K; i < (r + 1) * K; ++i) {
      const double pt = std::exp(log_pt[i]);
      if (pt > 0.0) kl += pt * (log_pt[i] - log_ps[i]);
    }
    // KL is non-negative; a negative row sum is pure round-off.
    total += std::max(kl, 0.0);
  }
  return total / static_cast<double>(rows);
}

HybridLoss hybrid_loss(const Tensor& student_logits, const Tensor* teacher_logits,
                       const Tensor& targets, double alpha, double temperature) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ContractError("alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  HybridLoss loss;
  loss.ce_part = ce_loss(softmax_temperature(student_logits, 1.0), targets);
  if (teacher_logits != nullptr) {
    loss.kd_part = kd_loss(student_logits, *teacher_logits, temperature);
  } else if (alpha != 1.0) {
    throw ContractError("hybrid_loss with alpha < 1 needs teacher logits");
  }
  loss.total = alpha * loss.ce_part + (1.0 - alpha) * loss.kd_part;
  return loss;
}

Tensor hybrid_loss_grad(const Tensor& student_logits, const Tensor* teacher_logits,
                        const Tensor& targets, double alpha, double temperature, bool t_squared) {
  require_same_shape(student_logits, targets, "hybrid_loss_grad");
  const double batch = static_cast<double>(student_logits.dim(0));
  Tensor grad(student_logits.dims());
  if (alpha != 0.0) {
    const Tensor ps = softmax_temperature(student_logits, 1.0);
    const double scale = alpha / batch;
    for (std::size_t i = 0; i < grad.numel(); ++i) grad[i] = scale * (ps[i] - targets[i]);
  }
  if (alpha != 1.0) {
    if (teacher_logits == nullptr) throw ContractError("hybrid_loss_grad with alpha < 1 needs teacher logits");
    require_same_shape(student_logits, *teacher_logits, "hybrid_loss_grad (teacher/student class count)");
    const Tensor pst = softmax_temperature(student_logits, temperature);
    const Tensor ptt = softmax_temperature(*teacher_logits, temperature);
    double scale = (1.0 - alpha) / (temperature * batch);
    if (t_squared) scale *= temperature * temperature;
    for (std::size_t i = 0; i < grad.numel(); ++i) grad[i] += scale * (pst[i] - ptt[i]);
  }
  return grad;
}

AnnealResult anneal_temperature(int epoch, int total_epochs, double t_max, double t_min) {
  if (total_epochs < 1) throw ContractError("anneal_temperature: E must be >= 1");
  if (epoch < 0) throw ContractError("anneal_temperature: epoch must be >= 0");
  AnnealResult result;
  if (epoch > total_epochs) {
    result.temperature = t_min;
    result.warning = "epoch " + std::to_string(epoch) + " exceeds schedule length " +
                     std::to_string(total_epochs) + "; temperature clamped to T_min";
    return result;
  }
  if (epoch == total_epochs) {
    result.temperature = t_min;
    return result;
  }
  result.temperature = t_max - (t_max - t_min) * static_cast<double>(epoch) /
                                   static_cast<double>(total_epochs);
  return result;
}

}  // namespace weckd::distill
