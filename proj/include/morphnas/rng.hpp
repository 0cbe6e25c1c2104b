#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace morphnas {

/// Deterministic random source. Built on mt19937_64, whose output sequence is
/// fixed by the standard; the helpers below avoid the implementation-defined
/// std distributions so results match across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t index(std::uint64_t n) {
    // Rejection sampling removes modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  /// Uniform integer in [lo, hi].
  int range(int lo, int hi) { return lo + static_cast<int>(index(static_cast<std::uint64_t>(hi - lo) + 1)); }

  bool bernoulli(double p) { return uniform01() < p; }

  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal();

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
};

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Derives an independent named sub-stream seed from a root seed, e.g.
/// derive_seed(root, "policy-sample", {episode, branch, step}).
std::uint64_t derive_seed(std::uint64_t root, std::string_view name,
                          std::initializer_list<std::uint64_t> indices = {}) noexcept;

}  // namespace morphnas
