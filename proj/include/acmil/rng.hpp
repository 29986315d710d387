#pragma once

#include <array>
#include <cstdint>

namespace acmil {

/// Deterministic random stream: xoshiro256** (Blackman & Vigna) seeded by
/// SplitMix64. All derived distributions are implemented here rather than
/// taken from <random>, whose distributions are implementation-defined, so a
/// seed yields the same stream on every build.
///
/// Single-owner: never share one instance between threads. Use child() to
/// derive independent sub-streams for parallel work.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }

  /// Independent stream keyed on (this seed, stream index). Does not advance
  /// this generator.
  Rng child(std::uint64_t stream) const;

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer on [0, n); n must be positive. Rejection-sampled, unbiased.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via the Box-Muller transform (one value per call).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> s_{};
};

/// SplitMix64 finalizer; used for seeding and seed derivation.
std::uint64_t splitmix64(std::uint64_t x);

/// Combines a parent seed and an index into a new seed.
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index);

}  // namespace acmil
