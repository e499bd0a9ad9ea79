#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "fccl/nn/model.hpp"
#include "fccl/nn/tensor.hpp"

namespace fccl::nn {

enum class Mode { train, eval };

/// Statistics of one batch-norm layer's input for the batch that produced a tape.
/// Recorded in both modes; train mode also normalizes with them.
struct BatchNormRecord {
  std::vector<double> mean;  // per channel
  std::vector<double> var;   // per channel, biased (divide by N*H*W)
  std::vector<double> inv_std;  // of the statistics actually used to normalize
  Tensor normalized;
};

/// Everything backward() needs: every layer's input (activations[i]) and the
/// final output (activations.back()).
struct Tape {
  Mode mode = Mode::eval;
  std::vector<Tensor> activations;
  std::vector<BatchNormRecord> batch_norm;

  const Tensor& output() const { return activations.back(); }
  const Tensor& input_of(std::size_t layer) const { return activations[layer]; }
};

/// Runs the network. Throws ShapeError when `inputs` does not match the model's
/// input shape and NumericError (with the layer index) on non-finite output.
Tape forward_tape(const ModelSpec& spec, const ParameterVector& params, const Tensor& inputs,
                  Mode mode);

/// Logits only.
Tensor forward(const ModelSpec& spec, const ParameterVector& params, const Tensor& inputs,
               Mode mode);

struct Gradients {
  std::vector<double> params;
  Tensor inputs;  // empty unless requested
};

/// Extra loss gradients added to the gradient with respect to a layer's input,
/// indexed by layer. Used for losses defined on intermediate activations.
using Injections = std::vector<std::optional<Tensor>>;

/// Reverse-mode gradient of a scalar loss given d(loss)/d(output).
Gradients backward(const ModelSpec& spec, const ParameterVector& params, const Tape& tape,
                   const Tensor& output_grad, bool want_input_grad = false,
                   const Injections* injections = nullptr);

/// Exponential moving average of the batch statistics recorded in a train-mode
/// tape: running = (1 - momentum) * running + momentum * batch.
void update_running_stats(ParameterVector& params, const Tape& tape, double momentum = 0.1);

struct LossGrad {
  double value = 0.0;
  Tensor grad;  // d(value)/d(logits)
};

using LossFn = std::function<LossGrad(const Tensor& logits)>;

struct GradResult {
  double loss = 0.0;
  Gradients grads;
  Tape tape;
};

/// forward + loss + backward in one call.
GradResult grad(const ModelSpec& spec, const ParameterVector& params, const LossFn& loss,
                const Tensor& inputs, Mode mode = Mode::train, bool want_input_grad = false);

}  // namespace fccl::nn
