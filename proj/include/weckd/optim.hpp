#pragma once

#include "weckd/tape.hpp"

namespace weckd {

struct SgdOptions {
  double learning_rate = 1e-3;
  double momentum = 0.0;
};

// Momentum buffers, keyed like the parameters they belong to.
struct SgdState {
  std::map<std::string, Tensor> velocity;
};

// v <- momentum * v + g; theta <- theta - lr * v. Throws NumericError and
// leaves params and state untouched if any gradient is non-finite.
void sgd_step(ParameterSet& params, const GradientMap& grads, const SgdOptions& options,
              SgdState& state);

}  // namespace weckd
