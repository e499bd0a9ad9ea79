#pragma once

#include <span>
#include <vector>

#include "fccl/nn/model.hpp"

namespace fccl::nn {

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

struct SgdState {
  std::vector<double> velocity;
};

/// Momentum SGD on trainable values only; batch-norm running statistics are
/// left alone. Per element:
///   g' = g + weight_decay * w;  v = momentum * v + g';  w -= lr * v
/// Throws NumericError before touching anything if `gradient` is non-finite.
void sgd_step(ParameterVector& params, std::span<const double> gradient, const SgdConfig& config,
              SgdState& state);

}  // namespace fccl::nn
