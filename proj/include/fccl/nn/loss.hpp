#pragma once

#include <span>
#include <vector>

#include "fccl/nn/network.hpp"
#include "fccl/nn/tensor.hpp"

namespace fccl::nn {

/// Log arguments are clamped here to keep CE and KL finite.
inline constexpr double kLogFloor = 1e-12;

/// Row-wise softmax with max subtraction.
Tensor softmax(const Tensor& logits);

/// Mean over the batch of -log softmax(logits)[label].
double loss_ce(const Tensor& logits, std::span<const int> labels);
LossGrad ce_with_grad(const Tensor& logits, std::span<const int> labels);

/// KL(softmax(teacher) || softmax(student)) for each row.
std::vector<double> kl_per_sample(const Tensor& teacher_logits, const Tensor& student_logits);

/// Mean over the batch of the per-row KL divergence.
double loss_kl(const Tensor& teacher_logits, const Tensor& student_logits);

struct KlGrad {
  double value = 0.0;
  std::vector<double> per_sample;
  Tensor teacher_grad;
  Tensor student_grad;
};

/// value = (1/N) * sum_i weight_i * KL_i, with gradients for both logit sets.
/// Empty `weights` means all ones.
KlGrad kl_with_grad(const Tensor& teacher_logits, const Tensor& student_logits,
                    std::span<const double> weights = {});

}  // namespace fccl::nn
