#pragma once

// Synthetic 16x16 grayscale shapes: circle, square, cross, stripes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "headlab/error.hpp"
#include "headlab/rng.hpp"
#include "headlab/tensor.hpp"
#include "headlab/train.hpp"

namespace headlab {

inline constexpr std::size_t kSynthSize = 16;
inline constexpr std::size_t kSynthClassCount = 4;

enum class ShapeClass : std::size_t { circle = 0, square = 1, cross = 2, stripes = 3 };

inline constexpr std::array<std::string_view, kSynthClassCount> kShapeNames = {"circle", "square", "cross", "stripes"};

struct SynthOptions {
  bool jitter = true;           // position +-1 px, brightness +-0.1
  double noise_stddev = 0.0;    // optional additive Gaussian noise, e.g. 0.05
};

/// Clean rendering of a class, centred on the 16x16 canvas.
inline Tensor render_template(std::size_t cls) {
  if (cls >= kSynthClassCount) throw DomainError("unknown shape class " + std::to_string(cls));
  Tensor img = Tensor::matrix(kSynthSize, kSynthSize);
  const double c = 7.5;
  for (std::size_t r = 0; r < kSynthSize; ++r) {
    for (std::size_t col = 0; col < kSynthSize; ++col) {
      const double dr = static_cast<double>(r) - c, dc = static_cast<double>(col) - c;
      bool on = false;
      switch (static_cast<ShapeClass>(cls)) {
        case ShapeClass::circle: on = dr * dr + dc * dc <= 5.5 * 5.5; break;
        case ShapeClass::square: on = r >= 4 && r < 12 && col >= 4 && col < 12; break;
        case ShapeClass::cross:
          on = (r >= 7 && r < 9 && col >= 2 && col < 14) || (col >= 7 && col < 9 && r >= 2 && r < 14);
          break;
        case ShapeClass::stripes: on = (r / 2) % 2 == 0; break;
      }
      img(r, col) = on ? 1.0 : 0.0;
    }
  }
  return img;
}

inline std::vector<Tensor> templates() {
  std::vector<Tensor> out;
  for (std::size_t c = 0; c < kSynthClassCount; ++c) out.push_back(render_template(c));
  return out;
}

/// Deterministic sample for (class, seed). Draw order: dx, dy, brightness, then noise.
inline Tensor gen_sample(std::size_t cls, std::uint64_t seed, const SynthOptions& opts = {}) {
  const Tensor base = render_template(cls);
  if (!opts.jitter && opts.noise_stddev == 0.0) return base;
  Rng rng(seed);
  long dx = 0, dy = 0;
  double brightness = 0.0;
  if (opts.jitter) {
    dx = static_cast<long>(rng.below(3)) - 1;
    dy = static_cast<long>(rng.below(3)) - 1;
    brightness = rng.uniform(-0.1, 0.1);
  }
  const long n = static_cast<long>(kSynthSize);
  Tensor img = Tensor::matrix(kSynthSize, kSynthSize);
  for (long r = 0; r < n; ++r) {
    for (long c = 0; c < n; ++c) {
      const long sr = r - dy, sc = c - dx;
      double v = (sr >= 0 && sr < n && sc >= 0 && sc < n) ? base(static_cast<std::size_t>(sr), static_cast<std::size_t>(sc)) : 0.0;
      v += brightness;
      if (opts.noise_stddev > 0.0) v += opts.noise_stddev * rng.normal();
      img(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = std::clamp(v, 0.0, 1.0);
    }
  }
  return img;
}

/// Balanced training set: example i has class i % 4 and seed base_seed + i.
inline Dataset make_dataset(std::size_t count, std::uint64_t base_seed, const SynthOptions& opts = {}) {
  Dataset data;
  data.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t cls = i % kSynthClassCount;
    data.push_back({gen_sample(cls, base_seed + i, opts), cls});
  }
  return data;
}

}  // namespace headlab
