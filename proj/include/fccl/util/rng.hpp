#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace fccl {

/// Seeded random stream with platform-independent draws.
///
/// The standard library distributions are implementation-defined, so every
/// draw here is derived from the raw 64-bit output of std::mt19937_64, whose
/// sequence is fixed by the standard:
///   uniform()  = (u64 >> 11) * 2^-53, in [0, 1)
///   index(n)   = min(n - 1, floor(uniform() * n))
///   normal()   = Box-Muller on (1 - uniform(), uniform()), cosine branch only
///   gamma(a)   = Marsaglia-Tsang for a >= 1; a < 1 boosted via Gamma(a+1) * U^(1/a)
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t index(std::size_t n);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Natural log of a Gamma(shape, 1) draw; stays finite for tiny shapes where
  /// the draw itself underflows.
  double log_gamma_draw(double shape);
  double gamma(double shape);

  /// In-place Fisher-Yates, descending: for i = n-1..1 swap(i, index(i+1)).
  template <typename T>
  void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      const std::size_t j = index(i);
      std::swap(values[i - 1], values[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

/// FNV-1a 64-bit hash of `text`.
std::uint64_t fnv1a(std::string_view text);

/// SplitMix64 finalizer.
std::uint64_t splitmix64(std::uint64_t x);

/// Seed of the named stream: splitmix64(master ^ fnv1a(name)). Adding a new
/// stream name never changes the seed of an existing one.
std::uint64_t derive_seed(std::uint64_t master, std::string_view name);

/// Sub-stream keyed by an integer (task id, round, client id).
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t key);

}  // namespace fccl
