#include "weckd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "weckd/errors.hpp"
#include "weckd/rng.hpp"

namespace weckd {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kRelativeErrorFloor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

std::vector<std::size_t> pick_coordinates(std::size_t numel, std::size_t limit, Rng& rng) {
  std::vector<std::size_t> coords(numel);
  std::iota(coords.begin(), coords.end(), 0);
  if (limit == 0 || limit >= numel) return coords;
  std::vector<std::size_t> inner(coords.begin() + 1, coords.end() - 1);
  rng.shuffle(std::span<std::size_t>(inner));
  std::vector<std::size_t> picked{0, numel - 1};
  picked.insert(picked.end(), inner.begin(),
                inner.begin() + static_cast<std::ptrdiff_t>(std::max<std::size_t>(limit, 2) - 2));
  std::sort(picked.begin(), picked.end());
  return picked;
}

struct Probe {
  double loss = 0.0;
  std::vector<std::size_t> pattern;
};

Probe evaluate(const TapedLoss& fn, const ParameterSet& params, const std::string& name,
               std::size_t index) {
  Probe probe;
  try {
    const Tape tape = fn(params);
    probe.loss = tape.loss();
    probe.pattern = tape.branch_pattern();
  } catch (const NumericError& e) {
    throw NumericError("non-finite loss while perturbing " + name + "[" + std::to_string(index) +
                       "]: " + e.what());
  }
  if (!std::isfinite(probe.loss)) {
    throw NumericError("non-finite loss while perturbing " + name + "[" + std::to_string(index) +
                       "]");
  }
  return probe;
}

}  // namespace

FiniteDiffReport finite_diff_check(const TapedLoss& loss_fn, const ParameterSet& params,
                                   const FiniteDiffOptions& options) {
  if (!(options.epsilon >= 1e-7 && options.epsilon <= 1e-3)) {
    throw ContractError("finite_diff_check: epsilon must lie in [1e-7, 1e-3]");
  }
  const Tape base = loss_fn(params);
  const GradientMap analytic = backward(base);
  const std::vector<std::size_t> base_pattern = base.branch_pattern();
  FiniteDiffReport report;
  Rng rng(options.seed);
  ParameterSet probe = params;
  for (auto& [name, tensor] : probe) {
    const Tensor& grad = analytic.at(name);
    for (const std::size_t i : pick_coordinates(tensor.numel(), options.max_coords_per_tensor, rng)) {
      const double original = tensor[i];
      tensor[i] = original + options.epsilon;
      const Probe up = evaluate(loss_fn, probe, name, i);
      tensor[i] = original - options.epsilon;
      const Probe down = evaluate(loss_fn, probe, name, i);
      tensor[i] = original;
      if (options.skip_kinks && (up.pattern != base_pattern || down.pattern != base_pattern)) {
        ++report.kinks_skipped;
        continue;
      }
      const double numeric = (up.loss - down.loss) / (2.0 * options.epsilon);
      const double err = relative_error(grad[i], numeric);
      ++report.coordinates_checked;
      if (err > report.max_relative_error || report.worst_parameter.empty()) {
        report.max_relative_error = err;
        report.worst_parameter = name;
        report.worst_index = i;
        report.worst_analytic = grad[i];
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace weckd
