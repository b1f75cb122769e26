#pragma once

// Flow-matching objective, hand-derived backward passes for the toy DiT, Adam,
// and a central-difference gradient verifier.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "headlab/dit.hpp"
#include "headlab/error.hpp"
#include "headlab/rng.hpp"
#include "headlab/tensor.hpp"

namespace headlab {

/// x_t = alpha(t) x0 + sigma(t) eps. Flow matching is the only shipped instance.
struct NoiseSchedule {
  std::function<double(double)> alpha;
  std::function<double(double)> sigma;

  static NoiseSchedule flow_matching() {
    return {[](double t) { return 1.0 - t; }, [](double t) { return t; }};
  }
};

struct FlowSample {
  Tensor x_t;
  Tensor target_v;
};

/// Point on the straight noise-data path and its velocity eps - x0.
inline FlowSample flow_interpolate(const Tensor& x0, const Tensor& eps, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("time must lie in [0,1], got " + std::to_string(t));
  require_same_shape(x0, eps, "flow_interpolate");
  static const NoiseSchedule schedule = NoiseSchedule::flow_matching();
  const double a = schedule.alpha(t), s = schedule.sigma(t);
  FlowSample out{Tensor(x0.shape()), Tensor(x0.shape())};
  for (std::size_t i = 0; i < x0.size(); ++i) {
    out.x_t[i] = a * x0[i] + s * eps[i];
    out.target_v[i] = eps[i] - x0[i];
  }
  return out;
}

struct TrainConfig {
  std::size_t batch = 32;
  std::size_t steps = 3000;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double cfg_dropout = 0.1;
  std::uint64_t seed = 0;
  std::size_t log_every = 50;
  double divergence_loss = 1e3;

  void validate() const {
    if (batch == 0) throw DomainError("batch must be positive");
    if (log_every == 0) throw DomainError("log_every must be positive");
    if (!(lr > 0.0)) throw DomainError("lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw DomainError("adam betas must lie in [0,1)");
    if (!(adam_eps > 0.0)) throw DomainError("adam eps must be positive");
    if (!(cfg_dropout >= 0.0 && cfg_dropout <= 1.0)) throw DomainError("cfg_dropout must lie in [0,1]");
  }
};

struct TrainingExample {
  Tensor x0;
  std::size_t label = 0;
};

using Dataset = std::vector<TrainingExample>;

/// One fully drawn loss term: data, noise, time and (possibly dropped) condition.
struct LossItem {
  Tensor x0;
  Tensor eps;
  double t = 0.0;
  ClassLabel cond;
};

/// Draws `batch` loss terms. Per item, in order: example index, t, dropout coin, noise.
inline std::vector<LossItem> draw_loss_batch(const Dataset& data, std::size_t batch, double cfg_dropout, Rng& rng) {
  if (data.empty()) throw DomainError("dataset is empty");
  std::vector<LossItem> items;
  items.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    const TrainingExample& ex = data[rng.below(data.size())];
    LossItem item;
    item.x0 = ex.x0;
    item.t = rng.uniform();
    const bool drop = rng.uniform() < cfg_dropout;
    item.cond = drop ? ClassLabel{} : ClassLabel{ex.label};
    item.eps = rng.normal_tensor(ex.x0.shape());
    items.push_back(std::move(item));
  }
  return items;
}

/// Velocity model signature used by the loss: (x_t, t, cond) -> velocity.
using VelocityFn = std::function<Tensor(const Tensor&, double, ClassLabel)>;

/// Mean over items of the per-pixel mean squared velocity error.
inline double fm_loss(const VelocityFn& model, std::span<const LossItem> items) {
  if (items.empty()) throw DomainError("loss batch is empty");
  double total = 0.0;
  for (const LossItem& it : items) {
    const FlowSample fs = flow_interpolate(it.x0, it.eps, it.t);
    const Tensor pred = model(fs.x_t, it.t, it.cond);
    require_same_shape(pred, fs.target_v, "fm_loss");
    double se = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) se += (pred[i] - fs.target_v[i]) * (pred[i] - fs.target_v[i]);
    total += se / static_cast<double>(pred.size());
  }
  return total / static_cast<double>(items.size());
}

inline double fm_loss(const DitWeights& w, std::span<const LossItem> items) {
  return fm_loss([&](const Tensor& x, double t, ClassLabel c) { return dit_forward(w, x, t, c); }, items);
}

/// Draws a batch from `rng` and evaluates the loss on it.
inline double fm_loss(const DitWeights& w, const Dataset& data, std::size_t batch, double cfg_dropout, Rng& rng) {
  const auto items = draw_loss_batch(data, batch, cfg_dropout, rng);
  return fm_loss(w, items);
}

// ---------------------------------------------------------------------------
// Backward passes. Each accumulates parameter gradients into the given buffers
// and returns the gradient with respect to its input.

inline void accumulate_column_sums(const Tensor& dy, Tensor& db) {
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    const double* r = dy.row(i);
    for (std::size_t j = 0; j < dy.cols(); ++j) db[j] += r[j];
  }
}

/// y = x W + b.
inline Tensor linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dw, Tensor* db) {
  dw += matmul_tn(x, dy);
  if (db) accumulate_column_sums(dy, *db);
  return matmul_nt(dy, w);
}

inline Tensor layernorm_backward(const Tensor& x, const Tensor& gain, const Tensor& dy, Tensor& dgain, Tensor& dbias,
                                 double eps = kLayerNormEps) {
  const std::size_t n = x.rows(), d = x.cols();
  Tensor dx = Tensor::matrix(n, d);
  std::vector<double> xhat(d), dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xr = x.row(i);
    const double* dyr = dy.row(i);
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[j] = (xr[j] - mean) * rstd;
      dxhat[j] = dyr[j] * gain[j];
      dgain[j] += dyr[j] * xhat[j];
      dbias[j] += dyr[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat[j];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    double* dxr = dx.row(i);
    for (std::size_t j = 0; j < d; ++j) dxr[j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
  }
  return dx;
}

/// Backward through softmax attention (unperturbed maps) and the Q/K/V/O projections.
inline Tensor attention_backward(const Tensor& x, const AttentionLayerWeights& w, const AttentionCache& cache,
                                 const Tensor& dout, AttentionLayerWeights& grad) {
  const std::size_t heads = w.head_count(), dh = w.head_dim(), n = x.rows();
  if (cache.maps.size() != heads) throw std::logic_error("attention cache has no maps (bypassed layer)");
  grad.wo += matmul_tn(cache.heads_out, dout);
  const Tensor dheads = matmul_nt(dout, w.wo);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor dq = Tensor::matrix(n, heads * dh), dk = dq, dv = dq;
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor& a = cache.maps[h];
    const Tensor qh = column_slice(cache.q, h * dh, dh);
    const Tensor kh = column_slice(cache.k, h * dh, dh);
    const Tensor vh = column_slice(cache.v, h * dh, dh);
    const Tensor doh = column_slice(dheads, h * dh, dh);
    set_column_slice(dv, h * dh, matmul_tn(a, doh));
    Tensor ds = matmul_nt(doh, vh);  // dA
    for (std::size_t i = 0; i < n; ++i) {
      const double* ar = a.row(i);
      double* r = ds.row(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += r[j] * ar[j];
      for (std::size_t j = 0; j < n; ++j) r[j] = ar[j] * (r[j] - dot) * scale;
    }
    set_column_slice(dq, h * dh, matmul(ds, kh));
    set_column_slice(dk, h * dh, matmul_tn(ds, qh));
  }

  Tensor dx = Tensor::matrix(n, x.cols());
  const Tensor xt = transpose(x);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor dqh = column_slice(dq, h * dh, dh);
    const Tensor dkh = column_slice(dk, h * dh, dh);
    const Tensor dvh = column_slice(dv, h * dh, dh);
    grad.wq[h] += matmul(xt, dqh);
    grad.wk[h] += matmul(xt, dkh);
    grad.wv[h] += matmul(xt, dvh);
  }
  dx += matmul_nt(dq, stack_heads(w.wq));
  dx += matmul_nt(dk, stack_heads(w.wk));
  dx += matmul_nt(dv, stack_heads(w.wv));
  return dx;
}

/// Backpropagates d(loss)/d(prediction) for one forward pass into `grad`.
inline void dit_backward(const DitWeights& w, const ForwardCache& cache, const Tensor& dpred, DitWeights& grad) {
  const DitConfig& cfg = w.config;
  const std::size_t n = cfg.sequence_length(), d = cfg.model_dim;

  Tensor dy = Tensor::matrix(n, cfg.patch_dim());
  {
    const Tensor dtok = patchify(dpred, cfg.patch);
    std::copy_n(dtok.row(0), dtok.size(), dy.row(1));
  }
  Tensor dlnf = linear_backward(cache.ln_final, w.out_w, dy, grad.out_w, &grad.out_b);
  Tensor dx = layernorm_backward(cache.x_final, w.final_gain, dlnf, grad.final_gain, grad.final_bias);

  for (std::size_t l = cfg.layers; l-- > 0;) {
    const BlockWeights& b = w.blocks[l];
    BlockWeights& g = grad.blocks[l];
    const BlockCache& bc = cache.blocks[l];

    Tensor dact = linear_backward(bc.mlp_act, b.mlp_w2, dx, g.mlp_w2, &g.mlp_b2);
    for (std::size_t i = 0; i < dact.size(); ++i) dact[i] *= gelu_grad(bc.mlp_pre[i], bc.mlp_tanh[i]);
    Tensor dln2 = linear_backward(bc.ln2_out, b.mlp_w1, dact, g.mlp_w1, &g.mlp_b1);
    dx += layernorm_backward(bc.x_mid, b.ln2_gain, dln2, g.ln2_gain, g.ln2_bias);

    Tensor dln1 = attention_backward(bc.ln1_out, b.attn, bc.attn, dx, g.attn);
    dx += layernorm_backward(bc.x_in, b.ln1_gain, dln1, g.ln1_gain, g.ln1_bias);
  }

  // Embedding: row 0 is the class token, the rest are patch tokens; the time
  // embedding was added to every row.
  Tensor dtemb = Tensor::matrix(1, d);
  accumulate_column_sums(dx, dtemb);
  for (std::size_t j = 0; j < d; ++j) grad.class_emb(cache.class_row, j) += dx(0, j);
  const Tensor demb = row_slice(dx, 1, cfg.image_tokens());
  grad.pos += demb;
  linear_backward(cache.tokens, w.patch_w, demb, grad.patch_w, &grad.patch_b);

  Tensor dtime_act = linear_backward(cache.time_act, w.time_w2, dtemb, grad.time_w2, &grad.time_b2);
  for (std::size_t i = 0; i < dtime_act.size(); ++i) dtime_act[i] *= silu_grad(cache.time_pre[i]);
  linear_backward(cache.time_in, w.time_w1, dtime_act, grad.time_w1, &grad.time_b1);
}

/// Throws TrainingError naming the first parameter with a non-finite gradient.
inline void require_finite_gradient(const DitWeights& grad) {
  grad.visit([](const std::string& name, const Tensor& t) {
    if (!t.all_finite()) throw TrainingError("non-finite gradient in " + name);
  });
}

/// Loss on `items` and its gradient, written into `grad` (overwritten).
inline double loss_and_gradient(const DitWeights& w, std::span<const LossItem> items, DitWeights& grad) {
  if (items.empty()) throw DomainError("loss batch is empty");
  grad = DitWeights::zeros(w.config);
  const double inv_items = 1.0 / static_cast<double>(items.size());
  double total = 0.0;
  for (const LossItem& it : items) {
    const FlowSample fs = flow_interpolate(it.x0, it.eps, it.t);
    ForwardCache cache;
    const Tensor pred = dit_forward(w, fs.x_t, it.t, it.cond, PerturbSpec::none(), &cache);
    const double inv_px = 1.0 / static_cast<double>(pred.size());
    Tensor dpred(pred.shape());
    double se = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double r = pred[i] - fs.target_v[i];
      se += r * r;
      dpred[i] = 2.0 * r * inv_px * inv_items;
    }
    total += se * inv_px;
    dit_backward(w, cache, dpred, grad);
  }
  require_finite_gradient(grad);
  return total * inv_items;
}

// ---------------------------------------------------------------------------

class Adam {
 public:
  Adam(const DitWeights& like, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(DitWeights::zeros(like.config)), v_(m_) {}

  void step(DitWeights& w, const DitWeights& grad) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::vector<Tensor*> params, ms, vs;
    std::vector<const Tensor*> gs;
    w.visit([&](const std::string&, Tensor& t) { params.push_back(&t); });
    m_.visit([&](const std::string&, Tensor& t) { ms.push_back(&t); });
    v_.visit([&](const std::string&, Tensor& t) { vs.push_back(&t); });
    grad.visit([&](const std::string&, const Tensor& t) { gs.push_back(&t); });
    for (std::size_t p = 0; p < params.size(); ++p) {
      Tensor& x = *params[p];
      Tensor& m = *ms[p];
      Tensor& v = *vs[p];
      const Tensor& g = *gs[p];
      for (std::size_t i = 0; i < x.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        x[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  DitWeights m_, v_;
};

// ---------------------------------------------------------------------------
// Finite-difference verification.

/// Coarse parameter family, used to spread gradient probes.
inline std::string parameter_group(const std::string& name) {
  auto has = [&](const char* s) { return name.find(s) != std::string::npos; };
  if (has("attn.")) return "attention";
  if (has("ln1") || has("ln2") || has("final_")) return "layernorm";
  if (has("mlp_")) return "mlp";
  if (has("time_")) return "time_mlp";
  if (has("out_")) return "output";
  return "embedding";
}

struct GradientProbe {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradientCheckReport {
  double max_rel_error = 0.0;
  std::vector<GradientProbe> probes;
  std::vector<std::string> groups_covered;
};

inline constexpr double kFiniteDiffStep = 1e-5;
// Denominator floor for the relative error, so that gradients that are zero
// up to roundoff compare by absolute difference.
inline constexpr double kRelErrorFloor = 1e-7;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kRelErrorFloor});
}

/// Compares analytic gradients with central differences (step 1e-5) at
/// `probe_count` random scalar parameters, cycling through parameter groups.
inline GradientCheckReport finite_diff_check(const DitWeights& w, std::span<const LossItem> items,
                                             std::size_t probe_count, std::uint64_t seed) {
  DitWeights grad;
  loss_and_gradient(w, items, grad);

  struct Slot {
    std::string name;
    std::size_t ordinal;
    std::size_t size;
  };
  std::vector<std::string> group_names;
  std::vector<std::vector<Slot>> groups;
  std::size_t ordinal = 0;
  w.visit([&](const std::string& name, const Tensor& t) {
    const std::string g = parameter_group(name);
    auto it = std::find(group_names.begin(), group_names.end(), g);
    if (it == group_names.end()) {
      group_names.push_back(g);
      groups.emplace_back();
      it = group_names.end() - 1;
    }
    groups[static_cast<std::size_t>(it - group_names.begin())].push_back({name, ordinal++, t.size()});
  });

  auto tensor_at = [](DitWeights& m, std::size_t ord) {
    Tensor* found = nullptr;
    std::size_t i = 0;
    m.visit([&](const std::string&, Tensor& t) {
      if (i++ == ord) found = &t;
    });
    return found;
  };

  GradientCheckReport report;
  report.groups_covered = group_names;
  Rng rng(seed);
  DitWeights probe = w;
  DitWeights grad_copy = grad;
  for (std::size_t p = 0; p < probe_count; ++p) {
    const auto& group = groups[p % groups.size()];
    const Slot& slot = group[rng.below(group.size())];
    const std::size_t idx = rng.below(slot.size);
    Tensor* param = tensor_at(probe, slot.ordinal);
    const double orig = (*param)[idx];
    (*param)[idx] = orig + kFiniteDiffStep;
    const double lp = fm_loss(probe, items);
    (*param)[idx] = orig - kFiniteDiffStep;
    const double lm = fm_loss(probe, items);
    (*param)[idx] = orig;
    GradientProbe gp;
    gp.name = slot.name;
    gp.index = idx;
    gp.analytic = (*tensor_at(grad_copy, slot.ordinal))[idx];
    gp.numeric = (lp - lm) / (2.0 * kFiniteDiffStep);
    gp.rel_error = relative_error(gp.analytic, gp.numeric);
    report.max_rel_error = std::max(report.max_rel_error, gp.rel_error);
    report.probes.push_back(std::move(gp));
  }
  return report;
}

// ---------------------------------------------------------------------------

struct LossPoint {
  std::size_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  DitWeights weights;
  std::vector<LossPoint> curve;  // step 0: first batch; step s: mean over the window ending at s
  double initial_loss = 0.0;
  double final_loss = 0.0;

  double loss_ratio() const { return initial_loss > 0.0 ? final_loss / initial_loss : 0.0; }
};

/// Adam on the flow-matching loss. Deterministic given cfg.seed.
inline TrainResult train(DitWeights weights, const Dataset& data, const TrainConfig& cfg,
                         const std::function<void(const LossPoint&)>& on_log = {}) {
  cfg.validate();
  if (data.empty()) throw DomainError("dataset is empty");
  TrainResult result;
  Rng rng(cfg.seed);
  Adam adam(weights, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
  DitWeights grad;
  double window = 0.0;
  std::size_t window_count = 0;
  auto emit = [&](LossPoint pt) {
    result.curve.push_back(pt);
    if (on_log) on_log(pt);
  };
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto items = draw_loss_batch(data, cfg.batch, cfg.cfg_dropout, rng);
    const double loss = loss_and_gradient(weights, items, grad);
    if (!std::isfinite(loss) || loss > cfg.divergence_loss)
      throw TrainingError("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")");
    if (step == 0) {
      result.initial_loss = loss;
      emit({0, loss});
    }
    adam.step(weights, grad);
    window += loss;
    ++window_count;
    const std::size_t done = step + 1;
    if (done % cfg.log_every == 0 || done == cfg.steps) {
      result.final_loss = window / static_cast<double>(window_count);
      emit({done, result.final_loss});
      window = 0.0;
      window_count = 0;
    }
  }
  if (!weights.all_finite()) throw TrainingError("training produced non-finite weights");
  result.weights = std::move(weights);
  return result;
}

}  // namespace headlab
