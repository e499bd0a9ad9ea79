#include "fccl/nn/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "fccl/util/error.hpp"

namespace fccl::nn {

std::string Shape::str() const {
  return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
}

Tensor::Tensor(std::size_t batch, Shape shape, double fill)
    : batch_(batch), shape_(shape), values_(batch * shape.size(), fill) {}

Tensor::Tensor(std::size_t batch, Shape shape, std::vector<double> values)
    : batch_(batch), shape_(shape), values_(std::move(values)) {
  if (values_.size() != batch_ * shape_.size()) {
    throw ShapeError("tensor of " + std::to_string(batch_) + " x " + shape_.str() + " given " +
                     std::to_string(values_.size()) + " values");
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape.size() != shape_.size()) {
    throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
  }
  Tensor out = *this;
  out.shape_ = shape;
  return out;
}

Tensor Tensor::gather(std::span<const std::size_t> rows) const {
  Tensor out(rows.size(), shape_);
  const std::size_t s = sample_size();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= batch_) throw ShapeError("gather row out of range");
    std::copy_n(values_.begin() + static_cast<std::ptrdiff_t>(rows[r] * s), s,
                out.values_.begin() + static_cast<std::ptrdiff_t>(r * s));
  }
  return out;
}

Tensor Tensor::concat(const Tensor& a, const Tensor& b) {
  if (a.batch_ == 0) return b;
  if (b.batch_ == 0) return a;
  if (!(a.shape_ == b.shape_)) throw ShapeError("concat shape mismatch");
  Tensor out(a.batch_ + b.batch_, a.shape_);
  std::copy(a.values_.begin(), a.values_.end(), out.values_.begin());
  std::copy(b.values_.begin(), b.values_.end(),
            out.values_.begin() + static_cast<std::ptrdiff_t>(a.values_.size()));
  return out;
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.batch());
  for (std::size_t n = 0; n < logits.batch(); ++n) {
    const auto row = logits.sample(n);
    out[n] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

}  // namespace fccl::nn
