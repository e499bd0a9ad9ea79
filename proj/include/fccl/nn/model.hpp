#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fccl/nn/tensor.hpp"
#include "fccl/util/rng.hpp"

namespace fccl::nn {

// Layer descriptors. Affine expects a flat input; use Flatten or Reshape to
// move between spatial and flat shapes.
struct Affine {
  int out = 0;
};
struct Conv {
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 0;
};
/// Per-channel normalization; statistics run over batch x height x width.
struct BatchNorm {
  double eps = 1e-5;
};
struct Relu {};
struct Tanh {};
struct Flatten {};
/// Nearest-neighbour upsampling by an integer factor.
struct Upsample {
  int factor = 2;
};
struct Reshape {
  Shape shape;
};

using LayerDesc = std::variant<Affine, Conv, BatchNorm, Relu, Tanh, Flatten, Upsample, Reshape>;

enum class LayerKind : std::uint32_t {
  affine = 1,
  conv = 2,
  batch_norm = 3,
  relu = 4,
  tanh = 5,
  flatten = 6,
  upsample = 7,
  reshape = 8,
};

LayerKind kind_of(const LayerDesc& layer);
std::string_view kind_name(LayerKind kind);

struct ModelSpec {
  std::vector<LayerDesc> layers;
  Shape input_shape;
  int num_outputs = 0;

  std::size_t batch_norm_count() const;
};

struct LayerLayout {
  LayerKind kind{};
  Shape in;
  Shape out;
  std::size_t param_offset = 0;
  std::size_t param_count = 0;
  /// Index among the model's batch-norm layers, -1 for other kinds.
  int bn_index = -1;
  std::size_t bn_offset = 0;

  bool operator==(const LayerLayout&) const = default;
};

/// Parameter layout derived from a ModelSpec. Construction type-checks the
/// whole layer chain and throws ShapeError on the first incompatibility.
struct Layout {
  std::vector<LayerLayout> layers;
  std::size_t num_params = 0;
  std::size_t num_bn_channels = 0;

  static Layout of(const ModelSpec& spec);
  bool operator==(const Layout&) const = default;
};

/// All trainable values of one network plus its batch-norm running statistics.
///
/// Affine layers store W (out x in, row-major) then b; Conv layers store
/// W (out x in x k x k) then b; BatchNorm stores scale then shift.
struct ParameterVector {
  Layout layout;
  std::vector<double> values;
  std::vector<double> running_mean;
  std::vector<double> running_var;

  ParameterVector() = default;
  explicit ParameterVector(Layout l);

  std::size_t size() const { return values.size(); }
  bool same_layout(const ParameterVector& other) const { return layout == other.layout; }

  std::span<double> layer(std::size_t i) {
    return std::span<double>(values).subspan(layout.layers[i].param_offset,
                                             layout.layers[i].param_count);
  }
  std::span<const double> layer(std::size_t i) const {
    return std::span<const double>(values).subspan(layout.layers[i].param_offset,
                                                   layout.layers[i].param_count);
  }
};

/// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases, BN scale 1,
/// shift 0, running mean 0 and running variance 1.
ParameterVector init_params(const ModelSpec& spec, Rng& rng);

/// Builds a small classifier for images of `input`. `kind` is "cnn" or "mlp".
ModelSpec make_classifier(Shape input, int num_classes, const std::string& kind = "cnn",
                          int width = 16);

}  // namespace fccl::nn
