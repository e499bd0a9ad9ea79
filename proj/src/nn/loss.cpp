#include "fccl/nn/loss.hpp"

#include <algorithm>
#include <cmath>

#include "fccl/util/error.hpp"

namespace fccl::nn {
namespace {

void check_labels(const Tensor& logits, std::span<const int> labels) {
  if (labels.size() != logits.batch()) {
    throw ShapeError("label count " + std::to_string(labels.size()) + " does not match batch " +
                     std::to_string(logits.batch()));
  }
  const auto k = static_cast<int>(logits.sample_size());
  for (const int y : labels) {
    if (y < 0 || y >= k) {
      throw ShapeError("label " + std::to_string(y) + " out of range [0, " + std::to_string(k) + ")");
    }
  }
}

void check_pair(const Tensor& a, const Tensor& b) {
  if (a.batch() != b.batch() || a.sample_size() != b.sample_size()) {
    throw ShapeError("logit shapes differ");
  }
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  Tensor out(logits.batch(), logits.shape());
  const std::size_t k = logits.sample_size();
  for (std::size_t n = 0; n < logits.batch(); ++n) {
    const auto z = logits.sample(n);
    auto p = out.sample(n);
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      p[i] = std::exp(z[i] - m);
      s += p[i];
    }
    for (std::size_t i = 0; i < k; ++i) p[i] /= s;
  }
  return out;
}

double loss_ce(const Tensor& logits, std::span<const int> labels) {
  return ce_with_grad(logits, labels).value;
}

LossGrad ce_with_grad(const Tensor& logits, std::span<const int> labels) {
  check_labels(logits, labels);
  LossGrad r;
  r.grad = softmax(logits);
  const auto batch = static_cast<double>(logits.batch());
  double total = 0.0;
  for (std::size_t n = 0; n < logits.batch(); ++n) {
    auto p = r.grad.sample(n);
    const auto y = static_cast<std::size_t>(labels[n]);
    total -= std::log(std::max(p[y], kLogFloor));
    p[y] -= 1.0;
    for (double& v : p) v /= batch;
  }
  r.value = total / batch;
  return r;
}

std::vector<double> kl_per_sample(const Tensor& teacher_logits, const Tensor& student_logits) {
  check_pair(teacher_logits, student_logits);
  const Tensor p = softmax(teacher_logits);
  const Tensor q = softmax(student_logits);
  std::vector<double> out(p.batch(), 0.0);
  for (std::size_t n = 0; n < p.batch(); ++n) {
    const auto pr = p.sample(n);
    const auto qr = q.sample(n);
    double kl = 0.0;
    for (std::size_t i = 0; i < pr.size(); ++i) {
      if (pr[i] <= 0.0) continue;
      kl += pr[i] * (std::log(std::max(pr[i], kLogFloor)) - std::log(std::max(qr[i], kLogFloor)));
    }
    out[n] = std::max(kl, 0.0);
  }
  return out;
}

double loss_kl(const Tensor& teacher_logits, const Tensor& student_logits) {
  const auto per = kl_per_sample(teacher_logits, student_logits);
  double s = 0.0;
  for (const double v : per) s += v;
  return per.empty() ? 0.0 : s / static_cast<double>(per.size());
}

KlGrad kl_with_grad(const Tensor& teacher_logits, const Tensor& student_logits,
                    std::span<const double> weights) {
  check_pair(teacher_logits, student_logits);
  if (!weights.empty() && weights.size() != teacher_logits.batch()) {
    throw ShapeError("KL weight count does not match batch");
  }
  KlGrad r;
  const Tensor p = softmax(teacher_logits);
  const Tensor q = softmax(student_logits);
  r.teacher_grad = Tensor(p.batch(), p.shape());
  r.student_grad = Tensor(p.batch(), p.shape());
  r.per_sample.assign(p.batch(), 0.0);
  const auto batch = static_cast<double>(p.batch());
  double total = 0.0;
  for (std::size_t n = 0; n < p.batch(); ++n) {
    const auto pr = p.sample(n);
    const auto qr = q.sample(n);
    std::vector<double> log_ratio(pr.size());
    double kl = 0.0;
    for (std::size_t i = 0; i < pr.size(); ++i) {
      log_ratio[i] = std::log(std::max(pr[i], kLogFloor)) - std::log(std::max(qr[i], kLogFloor));
      kl += pr[i] * log_ratio[i];
    }
    kl = std::max(kl, 0.0);
    r.per_sample[n] = kl;
    const double w = weights.empty() ? 1.0 : weights[n];
    total += w * kl;
    if (w == 0.0) continue;
    auto gt = r.teacher_grad.sample(n);
    auto gs = r.student_grad.sample(n);
    const double scale = w / batch;
    for (std::size_t i = 0; i < pr.size(); ++i) {
      // d KL / d z_teacher = p (log p - log q - KL); d KL / d z_student = q - p.
      gt[i] = scale * pr[i] * (log_ratio[i] - kl);
      gs[i] = scale * (qr[i] - pr[i]);
    }
  }
  r.value = total / batch;
  return r;
}

}  // namespace fccl::nn
