#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace adaptrial {

/** SplitMix64 finalizer, used to turn (seed, tag) pairs into substream seeds. */
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/** Derives a decorrelated child seed; derive_stream(s, t) != derive_stream(s, t') for t != t'. */
inline std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t tag) {
  return mix64(mix64(seed ^ 0x8BADF00D5EEDULL) ^ mix64(tag));
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/**
 * Deterministic random stream. Wraps std::mt19937_64 (whose output sequence is
 * pinned by the standard) and layers portable uniform/normal/bernoulli draws on
 * top, so results are reproducible across platforms and worker counts.
 */
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  /** Uniform draw on [0, 1) with 53 random bits. */
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  /** Standard normal via Box-Muller; caches the second deviate. */
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace adaptrial
