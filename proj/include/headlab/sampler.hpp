#pragma once

// Euler sampler for the learned velocity field with classifier-free guidance
// and attention-perturbation guidance.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "headlab/attention.hpp"
#include "headlab/dit.hpp"
#include "headlab/error.hpp"
#include "headlab/rng.hpp"
#include "headlab/tensor.hpp"

namespace headlab {

/// What the perturbation term extrapolates away from when CFG is also on:
/// the conditional prediction (default) or the CFG-combined one.
enum class PertAnchor { cond, cfg };

struct GuidanceConfig {
  double w_cfg = 3.0;
  double w_pert = 3.0;
  ClassLabel cond;
  std::size_t steps = 20;
  std::uint64_t seed = 0;
  PertAnchor anchor = PertAnchor::cond;

  void validate() const {
    if (!(w_cfg >= 0.0) || !std::isfinite(w_cfg)) throw DomainError("w_cfg must be a finite value >= 0");
    if (!(w_pert >= 0.0) || !std::isfinite(w_pert)) throw DomainError("w_pert must be a finite value >= 0");
    if (steps == 0) throw DomainError("steps must be >= 1");
  }
};

/// v_cond + w (v_cond - v_uncond), i.e. (1 + w) v_cond - w v_uncond.
inline Tensor cfg_combine(const Tensor& v_cond, const Tensor& v_uncond, double w) {
  require_same_shape(v_cond, v_uncond, "cfg_combine");
  Tensor out = v_cond;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v_cond[i] + w * (v_cond[i] - v_uncond[i]);
  return out;
}

/// v_orig + w (v_orig - v_pert), i.e. (1 + w) v_orig - w v_pert.
inline Tensor apg_combine(const Tensor& v_orig, const Tensor& v_pert, double w) {
  require_same_shape(v_orig, v_pert, "apg_combine");
  Tensor out = v_orig;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v_orig[i] + w * (v_orig[i] - v_pert[i]);
  return out;
}

struct VelocityStats {
  std::size_t forward_passes = 0;
};

/// Guided velocity. Branches that cannot contribute (zero scale, inactive
/// spec) are not evaluated, so w_pert = 0 reduces to cfg_combine and w_cfg = 0
/// to apg_combine exactly.
inline Tensor combined_velocity(const DitWeights& w, const Tensor& x_t, double t, const GuidanceConfig& g,
                                const PerturbSpec& spec, VelocityStats* stats = nullptr) {
  const bool use_cfg = g.w_cfg != 0.0;
  const bool use_pert = g.w_pert != 0.0 && spec.active();
  auto forward = [&](ClassLabel c, const PerturbSpec& s) {
    if (stats) ++stats->forward_passes;
    return dit_forward(w, x_t, t, c, s);
  };

  const Tensor v_cond = forward(g.cond, PerturbSpec::none());
  if (!use_cfg && !use_pert) return v_cond;
  if (!use_pert) return cfg_combine(v_cond, forward(ClassLabel{}, PerturbSpec::none()), g.w_cfg);
  const Tensor v_pert = forward(g.cond, spec);
  if (!use_cfg) return apg_combine(v_cond, v_pert, g.w_pert);

  const Tensor v_cfg = cfg_combine(v_cond, forward(ClassLabel{}, PerturbSpec::none()), g.w_cfg);
  if (g.anchor == PertAnchor::cfg) return apg_combine(v_cfg, v_pert, g.w_pert);
  Tensor out = v_cfg;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v_cfg[i] + g.w_pert * (v_cond[i] - v_pert[i]);
  return out;
}

struct TrajectoryPoint {
  std::size_t step = 0;
  double t = 0.0;
  double mean = 0.0;
  double stddev = 0.0;
  double l2_to_unguided = 0.0;
};

struct SampleOptions {
  bool record_trajectory = false;
  // Also integrate the w_pert = 0 trajectory in lockstep to fill l2_to_unguided.
  bool track_unguided = false;
};

struct SampleResult {
  Tensor image;  // state at t = 0, unclamped
  std::vector<TrajectoryPoint> trajectory;
  std::size_t forward_passes = 0;
};

inline Tensor initial_noise(const DitConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal_tensor({cfg.image_size, cfg.image_size});
}

/// Euler integration from t = 1 (seeded noise) to t = 0 on the grid t_i = (steps - i) / steps.
inline SampleResult sample(const DitWeights& w, const GuidanceConfig& g, const PerturbSpec& spec,
                           const SampleOptions& opts = {}) {
  g.validate();
  spec.validate();
  const double dt = 1.0 / static_cast<double>(g.steps);
  Tensor x = initial_noise(w.config, g.seed);
  Tensor ref = x;
  GuidanceConfig unguided = g;
  unguided.w_pert = 0.0;
  const bool track = opts.record_trajectory && opts.track_unguided;

  SampleResult result;
  VelocityStats stats;
  auto record = [&](std::size_t step, double t) {
    if (!opts.record_trajectory) return;
    TrajectoryPoint pt;
    pt.step = step;
    pt.t = t;
    pt.mean = mean(x);
    double var = 0.0;
    for (double v : x.data()) var += (v - pt.mean) * (v - pt.mean);
    pt.stddev = std::sqrt(var / static_cast<double>(x.size()));
    pt.l2_to_unguided = track ? l2_distance(x, ref) : 0.0;
    result.trajectory.push_back(pt);
  };

  record(0, 1.0);
  for (std::size_t i = 0; i < g.steps; ++i) {
    const double t = static_cast<double>(g.steps - i) / static_cast<double>(g.steps);
    const Tensor v = combined_velocity(w, x, t, g, spec, &stats);
    for (std::size_t j = 0; j < x.size(); ++j) x[j] -= dt * v[j];
    if (!x.all_finite()) throw NumericError("sampler state became non-finite at step " + std::to_string(i));
    if (track) {
      const Tensor vr = combined_velocity(w, ref, t, unguided, PerturbSpec::none());
      for (std::size_t j = 0; j < ref.size(); ++j) ref[j] -= dt * vr[j];
    }
    record(i + 1, static_cast<double>(g.steps - i - 1) / static_cast<double>(g.steps));
  }
  result.image = std::move(x);
  result.forward_passes = stats.forward_passes;
  return result;
}

}  // namespace headlab
