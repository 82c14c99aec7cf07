#pragma once

#include <cmath>
#include <cstdint>

namespace tvseg {

/// Deterministic splitmix64 generator. All randomness in the project flows
/// through this class so that results are bit-reproducible and do not depend
/// on standard-library distribution internals. Streams for independent
/// consumers (per subject, per epoch, ...) are derived by hashing tags into
/// the seed, so resuming a run never has to replay earlier draws.
class Rng {
public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], both inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
    // Lemire multiply-shift; bias is < 2^-64 which is irrelevant here.
    uint64_t x = next_u64();
    uint64_t m = static_cast<uint64_t>((static_cast<__uint128_t>(x) * range) >> 64);
    return lo + static_cast<int64_t>(m);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (cosine branch only; two uniforms per draw).
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

private:
  uint64_t state_;
};

namespace detail {
inline uint64_t mix_tag(uint64_t h, uint64_t tag) {
  h ^= tag + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  uint64_t z = h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}
}  // namespace detail

/// Derive an independent stream from a base seed and an arbitrary tag list.
template <typename... Tags>
Rng make_stream(uint64_t seed, Tags... tags) {
  uint64_t h = detail::mix_tag(0x6a09e667f3bcc909ull, seed);
  ((h = detail::mix_tag(h, static_cast<uint64_t>(tags))), ...);
  return Rng(h);
}

}  // namespace tvseg
