#include "fccl/nn/sgd.hpp"

#include <cmath>

#include "fccl/util/error.hpp"

namespace fccl::nn {

void sgd_step(ParameterVector& params, std::span<const double> gradient, const SgdConfig& config,
              SgdState& state) {
  if (gradient.size() != params.values.size()) {
    throw ShapeError("gradient has " + std::to_string(gradient.size()) + " entries, parameters " +
                     std::to_string(params.values.size()));
  }
  for (std::size_t i = 0; i < gradient.size(); ++i) {
    if (!std::isfinite(gradient[i])) {
      throw NumericError("non-finite gradient entry " + std::to_string(i));
    }
  }
  if (state.velocity.size() != params.values.size()) state.velocity.assign(params.values.size(), 0.0);
  for (std::size_t i = 0; i < gradient.size(); ++i) {
    const double g = gradient[i] + config.weight_decay * params.values[i];
    state.velocity[i] = config.momentum * state.velocity[i] + g;
    params.values[i] -= config.lr * state.velocity[i];
  }
}

}  // namespace fccl::nn
