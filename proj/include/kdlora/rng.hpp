#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>

#include "kdlora/common.hpp"

namespace kdlora {

/// Seeded PRNG with hand-rolled distributions so that streams are bit-stable
/// across standard library implementations. One instance per stream: weight
/// init, batch shuffling and dropout each get their own.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  /// Box-Muller without a cached spare: always consumes two uniforms.
  double gaussian(double mean, double stddev) {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// Uniform integer in [0, n). Rejection-free modulo of a 64-bit draw is
  /// biased by < 2^-53 for the small n used here.
  std::uint64_t integer(std::uint64_t n) {
    if (n == 0) throw ParameterError("Rng::integer: n must be positive");
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::uint64_t j = integer(i);
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace kdlora
