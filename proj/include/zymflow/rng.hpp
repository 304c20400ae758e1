#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace zymflow {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seeded generator with hand-rolled distributions so that streams are stable
// across standard-library implementations. State is value-semantic and
// caller-owned; substreams are derived by counter-based splitting.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0)
      : seed_mix_(splitmix64(seed)), engine_(splitmix64(seed)) {}

  // Independent substream: deterministic function of (own seed, index).
  Rng split(std::uint64_t index) const {
    return Rng(seed_mix_ ^ splitmix64(index + 0x51ed2701ULL));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer uniform on [0, n).
  int uniform_int(int n) {
    int k = static_cast<int>(uniform() * static_cast<double>(n));
    return k >= n ? n - 1 : k;
  }

  // Standard normal via Box-Muller; no spare caching so call order maps
  // one-to-one onto engine draws.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Draw an index from unnormalized nonnegative weights.
  int categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = uniform() * total;
    for (std::size_t k = 0; k + 1 < weights.size(); ++k) {
      u -= weights[k];
      if (u < 0.0) return static_cast<int>(k);
    }
    return static_cast<int>(weights.size()) - 1;
  }

 private:
  std::uint64_t seed_mix_;
  std::mt19937_64 engine_;
};

}  // namespace zymflow
