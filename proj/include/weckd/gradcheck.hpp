#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "weckd/tape.hpp"

namespace weckd {

inline constexpr double kRelativeErrorFloor = 1e-6;

// Records a full forward pass ending in a scalar loss for the given parameters.
using TapedLoss = std::function<Tape(const ParameterSet&)>;

struct FiniteDiffOptions {
  double epsilon = 1e-5;
  // 0 checks every coordinate; otherwise a seeded sample of this many
  // coordinates per tensor (always including the first and last).
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
  // Skip coordinates whose +-eps probes change a ReLU mask or max-pool
  // winner; the loss is not differentiable across that point.
  bool skip_kinks = true;
};

struct FiniteDiffReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates_checked = 0;
  std::size_t kinks_skipped = 0;
};

// Compares analytic gradients from `backward` against central differences
// (L(theta + eps) - L(theta - eps)) / (2 eps). Relative error uses the
// denominator max(|analytic|, |numeric|, kRelativeErrorFloor).
FiniteDiffReport finite_diff_check(const TapedLoss& loss_fn, const ParameterSet& params,
                                   const FiniteDiffOptions& options = {});

double relative_error(double analytic, double numeric);

}  // namespace weckd
