#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fccl/nn/model.hpp"
#include "fccl/nn/network.hpp"
#include "fccl/nn/sgd.hpp"
#include "fccl/util/rng.hpp"

namespace fccl::inversion {

/// A network together with its parameters.
struct Net {
  nn::ModelSpec spec;
  nn::ParameterVector params;
};

/// noise z -> image. `body` ends in Tanh + Flatten; the flat output is
/// reshaped to `image` and squashed to [lo, hi] as lo + (hi - lo) * (t + 1) / 2.
struct GeneratorSpec {
  int noise_dim = 64;
  nn::ModelSpec body;
  nn::Shape image;
  double lo = 0.0;
  double hi = 1.0;
};

/// affine -> reshape(width, H/4, W/4) -> BN -> (upsample, conv, BN, relu) x 2
/// -> conv -> tanh. Image height and width must be multiples of 4.
GeneratorSpec make_generator(nn::Shape image, int noise_dim = 64, int width = 32, double lo = 0.0,
                             double hi = 1.0);

struct Generated {
  nn::Tensor images;
  nn::Tape tape;  // of the body, train mode
};

/// Generator forward in train mode.
Generated generate(const GeneratorSpec& gen, const nn::ParameterVector& params, const nn::Tensor& z);

/// Parameter gradient of a loss given d(loss)/d(images).
std::vector<double> generator_backward(const GeneratorSpec& gen, const nn::ParameterVector& params,
                                       const Generated& out, const nn::Tensor& image_grad);

/// Loss value with its gradient with respect to the synthetic inputs.
struct InputLoss {
  double value = 0.0;
  nn::Tensor input_grad;
};

/// CE(teacher(x), y) with the teacher in eval mode. Labels outside
/// `trained_classes` are rejected.
InputLoss gen_ce_loss(const Net& teacher, const nn::Tensor& x, std::span<const int> y,
                      std::span<const int> trained_classes);

/// -(1/N) sum_i w_i KL(teacher(x_i) || student(x_i)), w_i = 1 iff the two top-1
/// predictions differ. Teacher in eval mode, student in train mode. Always <= 0.
InputLoss gen_div_loss(const Net& teacher, const Net& student, const nn::Tensor& x);

/// sum over teacher BN layers of ||mu(x) - mu_run||_2 + ||var(x) - var_run||_2,
/// where mu(x), var(x) are the batch statistics of each BN layer's input and
/// the references are the teacher's stored running statistics.
InputLoss gen_bn_loss(const Net& teacher, const nn::Tensor& x);

struct GenLossParts {
  double ce = 0.0;
  double div = 0.0;
  double bn = 0.0;
  double total = 0.0;
  nn::Tensor input_grad;
};

/// ce + lambda_div * div + lambda_bn * bn, sharing one teacher pass.
GenLossParts gen_total_loss(const Net& teacher, const Net& student, const nn::Tensor& x,
                            std::span<const int> y, std::span<const int> trained_classes,
                            double lambda_div, double lambda_bn);

/// One SGD step of the student on KL(teacher(x) || student(x)); teacher in eval
/// mode, student in train mode (its running statistics follow the batch).
/// Returns the loss before the step.
double distill_student_step(const Net& teacher, Net& student, const nn::Tensor& x,
                            const nn::SgdConfig& sgd, nn::SgdState& state);

/// Generator-produced images carried between tasks. No labels are stored.
struct SyntheticMemory {
  nn::Tensor samples;
  std::size_t capacity = 0;
  int provenance = -1;  // task id of the teacher that produced them
  nn::Shape shape;
  double lo = 0.0;
  double hi = 1.0;

  std::size_t size() const { return samples.batch(); }
  bool empty() const { return size() == 0; }
  /// Appends rows of `batch` until the capacity is reached.
  void add(const nn::Tensor& batch);
  /// `n` rows: distinct when n <= size(), with replacement otherwise.
  nn::Tensor draw(std::size_t n, Rng& rng) const;
};

/// "FCSM", u32 version, u64 count, u32 c/h/w, i32 provenance, f64 lo, f64 hi,
/// u64 capacity, then count * c * h * w little-endian f32 values.
std::string encode_memory(const SyntheticMemory& memory);
SyntheticMemory decode_memory(std::string_view bytes);

struct GenerationConfig {
  int rounds = -1;          // -1: as many as needed to fill the capacity
  int generator_steps = 5;  // T_G
  int batch = 64;          // b
  int noise_dim = 64;
  int generator_width = 16;
  double generator_lr = 1e-3;
  double generator_momentum = 0.9;
  double generator_clip = 10.0;  // max L2 norm of the generator gradient, 0: off
  double student_lr = 0.05;
  int student_steps = 5;
  double lambda_div = 1.0;
  double lambda_bn = 10.0;
  std::size_t capacity = 0;
  double lo = 0.0;
  double hi = 1.0;
};

struct RoundTrace {
  double ce = 0.0;
  double div = 0.0;
  double bn = 0.0;
  double total = 0.0;
  double agreement = 0.0;  // student vs teacher top-1 on this round's synthetic batch
  double probe = -1.0;     // caller-supplied diagnostic, -1 when absent
};

struct InversionReport {
  std::vector<RoundTrace> rounds;
  bool diverged = false;
  std::string message;
};

struct GenerationResult {
  SyntheticMemory memory;
  InversionReport report;
};

/// Called after each round with the current student; used for diagnostics such
/// as agreement with the teacher on held-out data. The callback, not this
/// module, owns any real data.
using StudentProbe = std::function<double(const Net& student)>;

/// Server-side synthesis. Reads only the teacher. The student has the
/// teacher's architecture with fresh weights and, like the generator, is
/// discarded. Labels are drawn uniformly from `trained_classes` every round.
/// Throws ConfigError when capacity < batch or the teacher has no BN layer.
GenerationResult data_generation(const Net& teacher, std::span<const int> trained_classes,
                                 const GenerationConfig& config, int provenance, std::uint64_t seed,
                                 const StudentProbe& probe = {});

/// Top-1 agreement of two networks (eval mode) on `x`.
double agreement(const Net& a, const Net& b, const nn::Tensor& x);

}  // namespace fccl::inversion
