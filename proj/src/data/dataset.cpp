#include "fccl/data/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "fccl/util/error.hpp"
#include "fccl/util/rng.hpp"

namespace fccl::data {

LabeledDataset::LabeledDataset(nn::Shape shape, int num_classes, std::vector<double> pixels,
                               std::vector<int> labels)
    : shape_(shape), num_classes_(num_classes), pixels_(std::move(pixels)), labels_(std::move(labels)) {
  if (num_classes_ <= 0) throw DataError(DataError::Kind::invalid_argument, "num_classes must be positive");
  if (pixels_.size() != labels_.size() * shape_.size()) {
    throw DataError(DataError::Kind::count_mismatch, "pixel buffer does not match label count");
  }
  class_index_.assign(static_cast<std::size_t>(num_classes_), {});
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    const int y = labels_[i];
    if (y < 0 || y >= num_classes_) {
      throw DataError(DataError::Kind::invalid_argument,
                      "label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes_) + ")");
    }
    class_index_[static_cast<std::size_t>(y)].push_back(i);
  }
}

nn::Tensor LabeledDataset::inputs(std::span<const std::size_t> indices) const {
  nn::Tensor t(indices.size(), shape_);
  const std::size_t s = shape_.size();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto src = input(indices[r]);
    std::copy(src.begin(), src.end(), t.values().begin() + static_cast<std::ptrdiff_t>(r * s));
  }
  return t;
}

std::vector<int> LabeledDataset::labels(std::span<const std::size_t> indices) const {
  std::vector<int> y(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) y[r] = labels_[indices[r]];
  return y;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  nn::Tensor t = inputs(indices);
  return LabeledDataset(shape_, num_classes_, std::move(t.storage()), labels(indices));
}

TrainTest holdout_split(const LabeledDataset& dataset, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) {
    throw DataError(DataError::Kind::invalid_argument, "holdout fraction must be in [0, 1)");
  }
  Rng rng(seed);
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> test_idx;
  for (int c = 0; c < dataset.num_classes(); ++c) {
    auto idx = dataset.class_index(c);
    rng.shuffle(std::span<std::size_t>(idx));
    const auto n_test = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size())));
    test_idx.insert(test_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    train_idx.insert(train_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  return {dataset.subset(train_idx), dataset.subset(test_idx)};
}

ChannelStats channel_stats(const LabeledDataset& dataset) {
  const auto channels = static_cast<std::size_t>(dataset.shape().channels);
  const std::size_t plane = static_cast<std::size_t>(dataset.shape().height) * dataset.shape().width;
  ChannelStats st{std::vector<double>(channels, 0.0), std::vector<double>(channels, 0.0)};
  if (dataset.size() == 0) return st;
  const double count = static_cast<double>(dataset.size() * plane);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto x = dataset.input(i);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t k = 0; k < plane; ++k) st.mean[c] += x[c * plane + k];
    }
  }
  for (double& m : st.mean) m /= count;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto x = dataset.input(i);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t k = 0; k < plane; ++k) st.stddev[c] += std::pow(x[c * plane + k] - st.mean[c], 2);
    }
  }
  for (double& s : st.stddev) s = std::sqrt(s / count);
  return st;
}

LabeledDataset normalize(const LabeledDataset& dataset, const ChannelStats& stats) {
  const auto channels = static_cast<std::size_t>(dataset.shape().channels);
  const std::size_t plane = static_cast<std::size_t>(dataset.shape().height) * dataset.shape().width;
  std::vector<double> px = dataset.pixels();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double sd = stats.stddev[c] > 0.0 ? stats.stddev[c] : 1.0;
      for (std::size_t k = 0; k < plane; ++k) {
        double& v = px[(i * channels + c) * plane + k];
        v = (v - stats.mean[c]) / sd;
      }
    }
  }
  return LabeledDataset(dataset.shape(), dataset.num_classes(), std::move(px), dataset.labels());
}

}  // namespace fccl::data
