#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fccl/nn/tensor.hpp"

namespace fccl::data {

/// Labeled images stored contiguously, plus a per-class index.
class LabeledDataset {
 public:
  LabeledDataset() = default;
  /// Validates labels against `num_classes` and builds the class index.
  LabeledDataset(nn::Shape shape, int num_classes, std::vector<double> pixels,
                 std::vector<int> labels);

  std::size_t size() const { return labels_.size(); }
  int num_classes() const { return num_classes_; }
  const nn::Shape& shape() const { return shape_; }

  std::span<const double> input(std::size_t i) const {
    return std::span<const double>(pixels_).subspan(i * shape_.size(), shape_.size());
  }
  int label(std::size_t i) const { return labels_[i]; }
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<double>& pixels() const { return pixels_; }

  /// Sample indices of class `c`, ascending.
  const std::vector<std::size_t>& class_index(int c) const {
    return class_index_[static_cast<std::size_t>(c)];
  }

  nn::Tensor inputs(std::span<const std::size_t> indices) const;
  std::vector<int> labels(std::span<const std::size_t> indices) const;

  /// New dataset holding the listed samples, in order.
  LabeledDataset subset(std::span<const std::size_t> indices) const;

 private:
  nn::Shape shape_{};
  int num_classes_ = 0;
  std::vector<double> pixels_;
  std::vector<int> labels_;
  std::vector<std::vector<std::size_t>> class_index_;
};

struct TrainTest {
  LabeledDataset train;
  LabeledDataset test;
};

/// Per class, a seeded `fraction` of samples (rounded to nearest) goes to test.
TrainTest holdout_split(const LabeledDataset& dataset, double fraction, std::uint64_t seed);

/// Procedural stand-in for a natural-image benchmark; see toy.cpp for the
/// class pattern formulas. Total size is num_classes * per_class.
LabeledDataset generate_toy_dataset(int num_classes, int per_class, nn::Shape shape,
                                    std::uint64_t seed);

/// Reads an IDX image file (ubyte, N x H x W or N x C x H x W) and an IDX label
/// file (ubyte, N). Pixels are scaled to [0, 1]. `num_classes` <= 0 infers
/// max(label) + 1. Throws DataError with kind bad_magic, truncated or
/// count_mismatch.
LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path,
                        int num_classes = 0);
LabeledDataset decode_idx(std::string_view images, std::string_view labels, int num_classes = 0);

/// Writes pixels as round(clamp(v, 0, 1) * 255). Labels must fit in a byte.
void save_idx(const LabeledDataset& dataset, const std::string& images_path,
              const std::string& labels_path);
std::string encode_idx_images(const LabeledDataset& dataset);
std::string encode_idx_labels(const LabeledDataset& dataset);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

ChannelStats channel_stats(const LabeledDataset& dataset);

/// Per-channel standardization with the given statistics.
LabeledDataset normalize(const LabeledDataset& dataset, const ChannelStats& stats);

}  // namespace fccl::data
