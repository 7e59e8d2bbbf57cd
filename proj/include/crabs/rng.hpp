#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "crabs/common.hpp"

namespace crabs {

// xoshiro256++ with splitmix64 seeding. Hand-rolled so that streams are
// bit-reproducible across standard library implementations and trivially
// serializable (four words of state).
struct Rng {
  std::array<std::uint64_t, 4> s{};

  Rng() : Rng(0) {}
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& w : s) w = splitmix64(x);
  }

  static std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static std::uint64_t rotl(std::uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
  }

  std::uint64_t next_u64() {
    std::uint64_t result = rotl(s[0] + s[3], 23) + s[0];
    std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }

  // Derives an independent stream; `tag` distinguishes consumers of one seed.
  Rng fork(std::uint64_t tag) {
    std::uint64_t base = next_u64() ^ (0x9e3779b97f4a7c15ull * (tag + 1));
    return Rng(base);
  }

  // Uniform on [0,1): 53 mantissa bits.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int n) {  // [0, n)
    return int(next_u64() % std::uint64_t(n));
  }

  // Box-Muller without the cached second value: the draw sequence stays a
  // pure function of call count.
  double normal() {
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  void fill_normal(Vec& v) {
    for (auto& x : v) x = normal();
  }
};

}  // namespace crabs
