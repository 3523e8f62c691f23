#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace emt {

/// Portable deterministic generator.
///
/// The raw engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. The std distributions are implementation-defined, so the
/// derived draws (uniform, bounded integer, normal) are computed here from
/// raw engine words. Identical seeds give identical streams on every
/// platform and standard library.
class Rng {
 public:
  static constexpr std::string_view kAlgorithm =
      "mt19937_64; uniform=53-bit mantissa; bounded=rejection; normal=Box-Muller";

  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, bound). bound must be positive.
  std::uint64_t bounded(std::uint64_t bound);

  double normal();
  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  template <typename T>
  void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(bounded(i));
      std::swap(values[i - 1], values[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finalizer; derives independent child seeds from (seed, stream).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace emt
