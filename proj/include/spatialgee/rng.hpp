#pragma once

#include <cstdint>
#include <random>

#include "spatialgee/families.hpp"

namespace spatialgee {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Deterministic per-stream generator. Streams are derived from (seed, stream)
// so Monte Carlo replications are reproducible independent of thread count.
// All variate transforms are spelled out here (no std::*_distribution) so the
// byte stream is identical across platforms and standard libraries.
class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t stream)
      : engine_(splitmix64(splitmix64(seed) ^ splitmix64(~stream))) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on (0,1), 53-bit resolution, never exactly 0 or 1.
  double uniform() {
    double u = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return u > 0.0 ? u : 0x1.0p-53;
  }

  double normal() { return normal_quantile(uniform()); }

  int bernoulli(double p) { return uniform() < p ? 1 : 0; }

  // Poisson by Knuth's product-of-uniforms; large means are split into
  // chunks, using Poisson(a) + Poisson(b) = Poisson(a+b).
  long poisson(double mean);

 private:
  long poisson_small_(double mean);
  std::mt19937_64 engine_;
};

inline long Rng::poisson_small_(double mean) {
  const double limit = std::exp(-mean);
  long k = 0;
  double p = 1.0;
  do {
    ++k;
    p *= uniform();
  } while (p > limit);
  return k - 1;
}

inline long Rng::poisson(double mean) {
  if (!(mean >= 0.0)) return 0;
  long total = 0;
  while (mean > 400.0) {
    total += poisson_small_(400.0);
    mean -= 400.0;
  }
  return total + poisson_small_(mean);
}

}  // namespace spatialgee
