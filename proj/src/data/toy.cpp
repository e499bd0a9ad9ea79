#include <algorithm>
#include <cmath>
#include <numbers>

#include "fccl/data/dataset.hpp"
#include "fccl/util/error.hpp"
#include "fccl/util/rng.hpp"

namespace fccl::data {

// Class c of K, pixel (row i, column j) of an H x W image, u = (j + 0.5) / W,
// v = (i + 0.5) / H:
//
//   orientation  a_c = pi * c / K
//   frequency    f_c = 2 + (c mod 3)                 cycles per image
//   blob centre  (0.5 + 0.28 cos(2 pi c / K), 0.5 + 0.28 sin(2 pi c / K))
//
//   x = 0.40 + 0.20 * A * cos(2 pi f_c (u cos a_c + v sin a_c) + phi + 0.7 * ch)
//       + 0.40 * exp(-|(u, v) - centre - jitter|^2 / (2 * 0.09^2)) + noise
//
// with per-sample draws, in this order: phi ~ U[0, 2 pi), A ~ U[0.8, 1.2),
// jitter ~ U[-0.06, 0.06)^2, then per pixel noise ~ N(0, 0.08^2). Values are
// clamped to [0, 1].
LabeledDataset generate_toy_dataset(int num_classes, int per_class, nn::Shape shape,
                                    std::uint64_t seed) {
  if (num_classes < 1) throw DataError(DataError::Kind::invalid_argument, "num_classes must be >= 1");
  if (per_class < 1) throw DataError(DataError::Kind::invalid_argument, "per_class must be >= 1");
  if (shape.size() == 0) throw DataError(DataError::Kind::invalid_argument, "empty image shape");
  constexpr double pi = std::numbers::pi;
  Rng rng(seed);
  const std::size_t n = static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(per_class);
  std::vector<double> pixels;
  pixels.reserve(n * shape.size());
  std::vector<int> labels;
  labels.reserve(n);
  const double k = num_classes;
  for (int c = 0; c < num_classes; ++c) {
    const double angle = pi * c / k;
    const double freq = 2.0 + (c % 3);
    const double cu = 0.5 + 0.28 * std::cos(2.0 * pi * c / k);
    const double cv = 0.5 + 0.28 * std::sin(2.0 * pi * c / k);
    const double du = std::cos(angle);
    const double dv = std::sin(angle);
    for (int s = 0; s < per_class; ++s) {
      const double phase = rng.uniform(0.0, 2.0 * pi);
      const double amp = rng.uniform(0.8, 1.2);
      const double ju = rng.uniform(-0.06, 0.06);
      const double jv = rng.uniform(-0.06, 0.06);
      for (int ch = 0; ch < shape.channels; ++ch) {
        for (int i = 0; i < shape.height; ++i) {
          const double v = (i + 0.5) / shape.height;
          for (int j = 0; j < shape.width; ++j) {
            const double u = (j + 0.5) / shape.width;
            const double grating =
                std::cos(2.0 * pi * freq * (u * du + v * dv) + phase + 0.7 * ch);
            const double ru = u - cu - ju;
            const double rv = v - cv - jv;
            const double blob = std::exp(-(ru * ru + rv * rv) / (2.0 * 0.09 * 0.09));
            const double x = 0.40 + 0.20 * amp * grating + 0.40 * blob + rng.normal(0.0, 0.08);
            pixels.push_back(std::clamp(x, 0.0, 1.0));
          }
        }
      }
      labels.push_back(c);
    }
  }
  return LabeledDataset(shape, num_classes, std::move(pixels), std::move(labels));
}

}  // namespace fccl::data
