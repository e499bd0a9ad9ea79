#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "fccl/nn/model.hpp"
#include "fccl/nn/network.hpp"
#include "fccl/util/rng.hpp"

namespace fccl::test {

inline nn::Tensor random_tensor(std::size_t batch, nn::Shape shape, Rng& rng, double lo = -1.0,
                                double hi = 1.0) {
  nn::Tensor t(batch, shape);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline std::vector<int> random_labels(std::size_t n, int k, Rng& rng) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng.index(static_cast<std::size_t>(k)));
  return y;
}

/// Central finite differences of `f` with respect to every entry of `x`.
inline std::vector<double> central_differences(std::vector<double>& x,
                                               const std::function<double()>& f,
                                               double eps = 1e-3) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double up = f();
    x[i] = keep - eps;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

/// Largest element-wise violation of |a - n| <= rel * max(|a|, |n|) + abs_floor,
/// expressed as a ratio (<= 1 means every entry passes).
inline double worst_gradient_ratio(const std::vector<double>& analytic,
                                   const std::vector<double>& numeric, double rel = 1e-4,
                                   double abs_floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double tol = rel * std::max(std::abs(analytic[i]), std::abs(numeric[i])) + abs_floor;
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / tol);
  }
  return worst;
}

}  // namespace fccl::test
