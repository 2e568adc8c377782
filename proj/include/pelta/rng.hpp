#pragma once

#include <cstdint>
#include <random>

namespace pelta {

/// Deterministic random source. Every draw in the project flows from an
/// explicit seed; independent streams are derived with `derive` so that
/// per-sample work is reproducible regardless of scheduling order.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform in [0,1). Built from raw bits so the sequence does not depend
  /// on the standard library's distribution implementation.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(eng_() % span);
  }

  /// Random sign, +1 or -1.
  double sign() { return (eng_() & 1u) ? 1.0 : -1.0; }

  /// splitmix64-style seed derivation for independent sub-streams.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

private:
  std::mt19937_64 eng_;
};

}  // namespace pelta
