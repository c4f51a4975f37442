#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace dcba {

using Rng = std::mt19937_64;

/// Independent RNG streams derived from one experiment seed.
enum class RngStream : std::uint64_t {
  init = 1,
  data = 2,
  buffer = 3,
  reservoir = 4,
  ibn = 5,
  probe = 6,
  cba = 7,
  blurry = 8,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline Rng make_rng(std::uint64_t seed, RngStream stream) {
  return Rng(splitmix64(seed * 0x100000001b3ULL + static_cast<std::uint64_t>(stream)));
}

/// Uniform integer in [0, n). Uses rejection on the raw engine output so the
/// sequence does not depend on the standard library's distribution code.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = Rng::max() - (Rng::max() % n);
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Standard normal via Box-Muller; one draw per call.
inline double normal01(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925 * u2);
}

}  // namespace dcba
