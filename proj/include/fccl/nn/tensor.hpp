#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace fccl::nn {

/// Per-sample shape, channels x height x width. Flat vectors use (n, 1, 1).
struct Shape {
  int channels = 1;
  int height = 1;
  int width = 1;

  constexpr std::size_t size() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  constexpr bool flat() const { return height == 1 && width == 1; }
  constexpr bool operator==(const Shape&) const = default;

  std::string str() const;
};

/// Dense NCHW batch of doubles.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t batch, Shape shape, double fill = 0.0);
  Tensor(std::size_t batch, Shape shape, std::vector<double> values);

  std::size_t batch() const { return batch_; }
  const Shape& shape() const { return shape_; }
  std::size_t sample_size() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::vector<double>& storage() { return values_; }

  std::span<double> sample(std::size_t n) {
    return std::span<double>(values_).subspan(n * sample_size(), sample_size());
  }
  std::span<const double> sample(std::size_t n) const {
    return std::span<const double>(values_).subspan(n * sample_size(), sample_size());
  }

  double& operator()(std::size_t n, std::size_t i) { return values_[n * sample_size() + i]; }
  double operator()(std::size_t n, std::size_t i) const { return values_[n * sample_size() + i]; }

  /// Same values under a new per-sample shape of equal size.
  Tensor reshaped(Shape shape) const;

  /// Rows `rows` of this tensor, in order.
  Tensor gather(std::span<const std::size_t> rows) const;

  /// Stacks `a` on top of `b`; shapes must match.
  static Tensor concat(const Tensor& a, const Tensor& b);

  bool all_finite() const;

 private:
  std::size_t batch_ = 0;
  Shape shape_{};
  std::vector<double> values_;
};

/// argmax over each row of a flat logits tensor.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace fccl::nn
