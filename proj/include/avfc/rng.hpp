#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace avfc {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and any number of
/// stream coordinates (sample index, step, purpose tag, ...).
inline std::uint64_t derive_seed(std::uint64_t base,
                                 std::initializer_list<std::uint64_t> keys) {
  std::uint64_t s = splitmix64(base);
  for (std::uint64_t k : keys) s = splitmix64(s ^ splitmix64(k + 0x632BE59BD9B4E019ULL));
  return s;
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> keys = {}) {
  return Rng(derive_seed(base, keys));
}

/// Uniform integer in [lo, hi], inclusive. Written out instead of
/// std::uniform_int_distribution so streams are identical across standard
/// libraries.
inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  if (hi <= lo) return lo;
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<std::int64_t>(rng() % span);
}

/// Uniform real in [0, 1).
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
}

inline double normal(Rng& rng) {
  // Box-Muller on our own uniforms for portability.
  constexpr double two_pi = 6.283185307179586476925286766559;
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

}  // namespace avfc
