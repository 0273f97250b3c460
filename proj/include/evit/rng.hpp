#pragma once

#include <cmath>
#include <cstdint>

namespace evit {

// splitmix64: used both to expand a user seed into xoshiro state and to
// derive independent child seeds (weights vs. input batches) from one
// --seed value without correlated streams.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  uint64_t s = seed;
  for (uint64_t i = 0; i <= stream; ++i) splitmix64(s);
  return s;
}

// xoshiro256++ (Blackman & Vigna). Deliberately frozen: the generator, the
// seeding path and the float derivations below are part of the engine's
// reproducibility contract, so outputs for a given seed never change.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& word : state_) word = splitmix64(sm);
    have_cached_normal_ = false;
    cached_normal_ = 0.0;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0,1) from the top 53 bits, so f64 values are exact.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Standard normal via Box-Muller, caching the second value.
  double normal() {
    if (have_cached_normal_) {
      have_cached_normal_ = false;
      return cached_normal_;
    }
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    cached_normal_ = r * std::sin(theta);
    have_cached_normal_ = true;
    return r * std::cos(theta);
  }

  // Normal(0, stddev) resampled until inside +-2 stddev. Used by the
  // weight initializer; the resampling loop terminates with probability 1
  // and in practice after ~1.05 draws.
  double trunc_normal(double stddev) {
    for (;;) {
      const double v = normal() * stddev;
      if (v >= -2.0 * stddev && v <= 2.0 * stddev) return v;
    }
  }

  // Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t state_[4];
  bool have_cached_normal_;
  double cached_normal_;
};

}  // namespace evit
