#pragma once

#include <cstdint>
#include <random>

namespace slap {

/// Seeded RNG with cheap stream splitting so parallel workers can draw from
/// independent, reproducible substreams.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(mix(seed)), seed_material_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  int uniform_int(int lo, int hi) {  // inclusive bounds
    return std::uniform_int_distribution<int>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  uint64_t next_u64() { return engine_(); }

  /// Deterministic substream derived from this stream's seed and an index.
  Rng substream(uint64_t index) const { return Rng(mix(seed_material_ + 0x9e3779b97f4a7c15ULL * (index + 1))); }

  std::mt19937_64& engine() { return engine_; }

 private:
  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::mt19937_64 engine_;
  uint64_t seed_material_ = 0;
};

}  // namespace slap
