#include "weckd/optim.hpp"

#include "weckd/errors.hpp"

namespace weckd {

void sgd_step(ParameterSet& params, const GradientMap& grads, const SgdOptions& options,
              SgdState& state) {
  if (!(options.learning_rate > 0.0)) throw ContractError("sgd: learning rate must be positive");
  if (!(options.momentum >= 0.0 && options.momentum < 1.0)) {
    throw ContractError("sgd: momentum must lie in [0, 1)");
  }
  for (const auto& [name, grad] : grads) {
    const auto it = params.find(name);
    if (it == params.end()) throw ContractError("sgd: gradient for unknown parameter " + name);
    if (it->second.dims() != grad.dims()) {
      throw ShapeError("sgd: gradient " + grad.shape_string() + " does not match parameter " + name +
                       " " + it->second.shape_string());
    }
    if (!grad.all_finite()) throw NumericError("sgd: non-finite gradient for " + name + "; step aborted");
  }
  for (const auto& [name, grad] : grads) {
    Tensor& theta = params.at(name);
    auto [vit, fresh] = state.velocity.try_emplace(name, Tensor(grad.dims()));
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < grad.numel(); ++i) {
      v[i] = options.momentum * v[i] + grad[i];
      theta[i] -= options.learning_rate * v[i];
    }
  }
}

}  // namespace weckd
