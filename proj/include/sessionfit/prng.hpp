#pragma once

// Seedable pseudo-randomness for the whole engine.
//
// Generator: xoshiro256** (Blackman & Vigna). The 256-bit state is expanded
// from a 64-bit seed with four successive splitmix64 outputs, the seeding
// procedure recommended by the generator's authors. Identical seeds yield
// identical streams on every platform.
//
// Raw-output consumption is fixed and documented per helper so that streams
// stay reproducible:
//   next_uniform   1 raw output per sample
//   next_normal    2 raw outputs per sample (Box-Muller, cosine branch)
//   next_below     1 or more raw outputs (rejection sampling, exact uniform)

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "sessionfit/detmath.hpp"

namespace sessionfit {

inline constexpr std::uint64_t kGolden64 = 0x9E3779B97F4A7C15ULL;

// Finalizer of splitmix64.
inline std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// k-th output (0-based) of the splitmix64 stream seeded with `seed`.
// Used wherever a family of decorrelated sub-seeds is derived from one seed.
inline std::uint64_t splitmix64_at(std::uint64_t seed, std::uint64_t k) {
  return splitmix64_mix(seed + (k + 1) * kGolden64);
}

class Prng {
 public:
  explicit Prng(std::uint64_t seed) {
    for (int i = 0; i < 4; ++i) state_[i] = splitmix64_at(seed, static_cast<std::uint64_t>(i));
    if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform double in [0,1), one raw output.
  double next_unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform double in (0,1], one raw output.
  double next_unit_pos() {
    return static_cast<double>((next() >> 11) + 1) * 0x1.0p-53;
  }

  // Uniform float in [lo, hi), one raw output.
  float next_uniform(float lo, float hi) {
    if (!(lo < hi)) throw std::invalid_argument("next_uniform: requires lo < hi");
    const double v = static_cast<double>(lo) +
                     next_unit() * (static_cast<double>(hi) - static_cast<double>(lo));
    float r = static_cast<float>(v);
    if (r >= hi) r = std::nextafter(hi, lo);
    if (r < lo) r = lo;
    return r;
  }

  // Standard normal via Box-Muller, cosine branch; exactly two raw outputs.
  double next_normal() {
    const double u1 = next_unit_pos();
    const double u2 = next_unit();
    const double radius = std::sqrt(-2.0 * det_log(u1));
    return radius * det_cos(detail::kTwoPi * u2);
  }

  // Exact uniform integer in [0, n) by rejection sampling.
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("next_below: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next();
    while (x >= limit) x = next();
    return x % n;
  }

  // Uniform integer in [lo, hi], inclusive.
  std::int64_t next_int(std::int64_t lo, std::int64_t hi) {
    if (lo > hi) throw std::invalid_argument("next_int: requires lo <= hi");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_below(span));
  }

  // Fisher-Yates shuffle, high index downwards.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::array<std::uint64_t, 4> state_;
};

}  // namespace sessionfit
