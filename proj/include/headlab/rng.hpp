#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "headlab/tensor.hpp"

namespace headlab {

/// SplitMix64: a Weyl counter (state += 0x9E3779B97F4A7C15) followed by a
/// xor-shift-multiply finalizer. The stream is a pure function of the seed.
///
///   uniform()  = (next_u64() >> 11) * 2^-53            in [0, 1)
///   normal()   = sqrt(-2 ln(1 - u1)) * cos(2 pi u2)     u1 drawn before u2
///
/// Single-owner; hand out independent streams with split().
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  Tensor normal_tensor(Shape shape, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = stddev * normal();
    return t;
  }

  /// Child stream seeded from this one's next output.
  Rng split() { return Rng(next_u64()); }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

}  // namespace headlab
