#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace phidpc {

/**
 * @brief Counter-based generator: draw i is splitmix64(seed + (i + 1) * 0x9E3779B97F4A7C15).
 *
 * The stream is fully determined by the seed and the draw counter, so it can be
 * reproduced bit-for-bit in any language with 64-bit unsigned arithmetic.
 *
 * - uniform():  (bits >> 11) * 2^-53, in [0, 1)
 * - normal():   Box-Muller on two consecutive uniforms u1, u2 with u1 mapped to (0, 1]:
 *               r = sqrt(-2 ln u1); returns r cos(2 pi u2), then r sin(2 pi u2) on the next call.
 */
class CounterRng
{
public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

  static std::uint64_t mix(std::uint64_t z)
  {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64()
  {
    ++counter_;
    return mix(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n); n must be positive.
  std::uint64_t below(std::uint64_t n)
  {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  double normal()
  {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(angle);
    has_spare_ = true;
    return r * std::cos(angle);
  }

  std::uint64_t draws() const { return counter_; }

private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace phidpc
