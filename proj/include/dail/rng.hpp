#pragma once

// Deterministic random streams. Streams are derived from (seed, key...) so any
// unit of work (a problem, a sample index, an init site) owns its own stream
// and results do not depend on worker count or scheduling.

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>

#include "dail/common.hpp"

namespace dail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  // Stream keyed by an arbitrary tuple of 64-bit values.
  static Rng keyed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
    std::uint64_t h = 0x6a09e667f3bcc909ull ^ seed;
    for (std::uint64_t k : keys) {
      h ^= k + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
      std::uint64_t sm = h;
      h = splitmix64(sm);
    }
    return Rng(h);
  }

  static Rng keyed(std::uint64_t seed, std::string_view name,
                   std::initializer_list<std::uint64_t> keys = {}) {
    Rng base = keyed(seed, {fnv1a64(name)});
    std::uint64_t h = base.next_u64();
    for (std::uint64_t k : keys) {
      std::uint64_t sm = h ^ k;
      h = splitmix64(sm);
    }
    return Rng(h);
  }

  std::uint64_t next_u64() {
    // xoshiro256**
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Box-Muller without caching: two u64 per draw, no hidden state.
  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // Uniform integer in [0, n). Rejection-free modulo bias is negligible for
  // the small n used here, but do it properly anyway.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }
  std::array<std::uint64_t, 4> s_{};
};

}  // namespace dail
