#pragma once

// Multi-head self-attention with a per-head hook that swaps a head's attention
// map for a perturbed one before it is applied to the values.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "headlab/error.hpp"
#include "headlab/tensor.hpp"

namespace headlab {

struct HeadId {
  std::size_t layer = 0;
  std::size_t head = 0;

  auto operator<=>(const HeadId&) const = default;
};

inline std::string to_string(HeadId id) { return std::to_string(id.layer) + ":" + std::to_string(id.head); }

enum class PerturbMethod {
  none,
  pag,                // A -> I
  soft_pag,           // (1-u) A + u I
  uniform,            // A -> U
  soft_uniform,       // (1-u) A + u U
  soft_seg,           // (1-u) A + u A(mean query)
  temperature,        // softmax(log A / tau)
  max_guidance,       // A -> one-hot row argmax
  soft_max_guidance,  // (1-u) A + u one-hot
};

inline constexpr PerturbMethod kAllPerturbMethods[] = {
    PerturbMethod::none,        PerturbMethod::pag,          PerturbMethod::soft_pag,
    PerturbMethod::uniform,     PerturbMethod::soft_uniform, PerturbMethod::soft_seg,
    PerturbMethod::temperature, PerturbMethod::max_guidance, PerturbMethod::soft_max_guidance,
};

inline std::string_view to_string(PerturbMethod m) {
  switch (m) {
    case PerturbMethod::none: return "none";
    case PerturbMethod::pag: return "pag";
    case PerturbMethod::soft_pag: return "soft_pag";
    case PerturbMethod::uniform: return "uniform";
    case PerturbMethod::soft_uniform: return "soft_uniform";
    case PerturbMethod::soft_seg: return "soft_seg";
    case PerturbMethod::temperature: return "temperature";
    case PerturbMethod::max_guidance: return "max_guidance";
    case PerturbMethod::soft_max_guidance: return "soft_max_guidance";
  }
  return "none";
}

inline std::optional<PerturbMethod> parse_perturb_method(std::string_view name) {
  for (PerturbMethod m : kAllPerturbMethods)
    if (to_string(m) == name) return m;
  return std::nullopt;
}

/// The head set S together with the perturbation applied to every head in it.
struct PerturbSpec {
  std::vector<HeadId> heads;
  PerturbMethod method = PerturbMethod::none;
  double u = 1.0;
  double tau = 1.0;
  // Layers whose attention is bypassed wholesale (output = values), the
  // layer-granular PAG path. Used as a reference for head-level specs.
  std::vector<std::size_t> pag_layers;

  static PerturbSpec none() { return {}; }

  static PerturbSpec of(std::vector<HeadId> heads, PerturbMethod method, double u = 1.0, double tau = 1.0) {
    PerturbSpec s;
    s.heads = std::move(heads);
    s.method = method;
    s.u = u;
    s.tau = tau;
    return s;
  }

  bool perturbs_heads() const { return method != PerturbMethod::none && !heads.empty(); }

  /// True when a forward pass under this spec can differ from the plain one.
  bool active() const { return perturbs_heads() || !pag_layers.empty(); }

  bool targets(HeadId id) const {
    return perturbs_heads() && std::find(heads.begin(), heads.end(), id) != heads.end();
  }

  bool bypasses_layer(std::size_t layer) const {
    return std::find(pag_layers.begin(), pag_layers.end(), layer) != pag_layers.end();
  }

  void validate() const {
    if (!(u >= 0.0 && u <= 1.0)) throw DomainError("interpolation weight u must lie in [0,1], got " + std::to_string(u));
    if (!(tau > 0.0) || !std::isfinite(tau)) throw DomainError("temperature tau must be positive, got " + std::to_string(tau));
    std::vector<HeadId> sorted = heads;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw DomainError("perturbation head set contains duplicates");
  }
};

/// Per-layer projections: one d x dh block per head for Q, K, V and a (H*dh) x d output map.
struct AttentionLayerWeights {
  std::vector<Tensor> wq, wk, wv;
  Tensor wo;

  std::size_t head_count() const { return wq.size(); }
  std::size_t model_dim() const { return wo.cols(); }
  std::size_t head_dim() const { return wq.empty() ? 0 : wq.front().cols(); }

  void validate() const {
    const std::size_t h = head_count();
    if (h == 0 || wk.size() != h || wv.size() != h) throw DimensionError("attention weights need one Q/K/V block per head");
    const Shape block{model_dim(), head_dim()};
    for (std::size_t i = 0; i < h; ++i) {
      if (wq[i].shape() != block || wk[i].shape() != block || wv[i].shape() != block)
        throw DimensionError("head " + std::to_string(i) + " projection is not " + shape_string(block));
    }
    if (wo.rows() != h * head_dim()) {
      throw DimensionError("output projection " + shape_string(wo.shape()) + " does not consume " +
                           std::to_string(h) + " heads of width " + std::to_string(head_dim()));
    }
  }
};

/// Concatenates per-head d x dh blocks column-wise into d x (H*dh).
inline Tensor stack_heads(const std::vector<Tensor>& blocks) {
  const std::size_t d = blocks.front().rows(), dh = blocks.front().cols();
  Tensor out = Tensor::matrix(d, dh * blocks.size());
  for (std::size_t h = 0; h < blocks.size(); ++h) set_column_slice(out, h * dh, blocks[h]);
  return out;
}

inline Tensor attention_map(const Tensor& q, const Tensor& k) {
  if (q.rank() != 2 || k.rank() != 2 || q.cols() != k.cols() || q.rows() != k.rows()) {
    throw DimensionError("attention_map operands " + shape_string(q.shape()) + " and " + shape_string(k.shape()) +
                         " disagree");
  }
  Tensor scores = matmul_nt(q, k);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  for (double& s : scores.data()) s *= scale;
  return softmax_rows(std::move(scores));
}

enum class TargetKind { identity, uniform, mean_query, argmax };

/// Replacement map toward which a perturbation moves A. `q` and `k` are only read for mean_query.
inline Tensor perturb_target(TargetKind kind, const Tensor& a, const Tensor* q = nullptr, const Tensor* k = nullptr) {
  detail::require_matrix(a, "attention map");
  const std::size_t n = a.rows(), m = a.cols();
  switch (kind) {
    case TargetKind::identity: {
      if (n != m) throw DimensionError("identity target needs a square map, got " + shape_string(a.shape()));
      Tensor t = Tensor::matrix(n, n);
      for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
      return t;
    }
    case TargetKind::uniform:
      return Tensor::matrix(n, m, 1.0 / static_cast<double>(m));
    case TargetKind::mean_query: {
      if (q == nullptr || k == nullptr) throw std::invalid_argument("mean_query target needs queries and keys");
      if (n != m || q->rows() != n || k->rows() != n || q->cols() != k->cols())
        throw DimensionError("mean_query operands " + shape_string(q->shape()) + "/" + shape_string(k->shape()) +
                             " do not match map " + shape_string(a.shape()));
      const std::size_t dh = q->cols();
      Tensor qbar = Tensor::matrix(1, dh);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dh; ++j) qbar(0, j) += (*q)(i, j);
      for (double& v : qbar.data()) v /= static_cast<double>(n);
      // Every row of Qbar K^T is the same, so one softmax row is computed and broadcast.
      Tensor row = matmul_nt(qbar, *k);
      const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
      for (double& v : row.data()) v *= scale;
      row = softmax_rows(std::move(row));
      Tensor t = Tensor::matrix(n, n);
      for (std::size_t i = 0; i < n; ++i) std::copy_n(row.row(0), n, t.row(i));
      return t;
    }
    case TargetKind::argmax: {
      Tensor t = Tensor::matrix(n, m);
      for (std::size_t i = 0; i < n; ++i) {
        const double* r = a.row(i);
        // std::max_element returns the first maximum: ties go to the lowest column.
        t(i, static_cast<std::size_t>(std::max_element(r, r + m) - r)) = 1.0;
      }
      return t;
    }
  }
  return a;
}

/// (1 - u) a + u target.
inline Tensor soft_mix(const Tensor& a, const Tensor& target, double u) {
  if (!(u >= 0.0 && u <= 1.0)) throw DomainError("soft_mix weight must lie in [0,1], got " + std::to_string(u));
  require_same_shape(a, target, "soft_mix");
  Tensor out = a;
  const double keep = 1.0 - u;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep * a[i] + u * target[i];
  return out;
}

inline constexpr double kProbabilityFloor = 1e-300;

/// softmax(log A / tau), with probabilities floored before the log.
inline Tensor temperature_scale(const Tensor& a, double tau) {
  if (!(tau > 0.0)) throw DomainError("temperature must be positive, got " + std::to_string(tau));
  Tensor logits = a;
  for (double& v : logits.data()) v = std::log(std::max(v, kProbabilityFloor)) / tau;
  return softmax_rows(std::move(logits));
}

/// The map a head in S uses in place of `a` under `spec`.
inline Tensor perturb_map(const PerturbSpec& spec, const Tensor& a, const Tensor& q, const Tensor& k) {
  switch (spec.method) {
    case PerturbMethod::none: return a;
    case PerturbMethod::pag: return perturb_target(TargetKind::identity, a);
    case PerturbMethod::soft_pag: return soft_mix(a, perturb_target(TargetKind::identity, a), spec.u);
    case PerturbMethod::uniform: return perturb_target(TargetKind::uniform, a);
    case PerturbMethod::soft_uniform: return soft_mix(a, perturb_target(TargetKind::uniform, a), spec.u);
    case PerturbMethod::soft_seg: return soft_mix(a, perturb_target(TargetKind::mean_query, a, &q, &k), spec.u);
    case PerturbMethod::temperature: return temperature_scale(a, spec.tau);
    case PerturbMethod::max_guidance: return perturb_target(TargetKind::argmax, a);
    case PerturbMethod::soft_max_guidance: return soft_mix(a, perturb_target(TargetKind::argmax, a), spec.u);
  }
  return a;
}

/// Intermediates kept for the backward pass.
struct AttentionCache {
  Tensor q, k, v;          // N x (H*dh), heads side by side
  std::vector<Tensor> maps;  // one N x N map per head, as applied
  Tensor heads_out;        // N x (H*dh)
};

inline void check_heads_in_range(const PerturbSpec& spec, std::size_t layer, std::size_t head_count) {
  if (!spec.perturbs_heads()) return;
  for (const HeadId& id : spec.heads)
    if (id.layer == layer && id.head >= head_count)
      throw DomainError("head " + to_string(id) + " out of range: layer has " + std::to_string(head_count) + " heads");
}

/// Multi-head attention over one sequence. Heads outside `spec` follow exactly
/// the unperturbed arithmetic.
inline Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_k, const Tensor& x_v,
                                   const AttentionLayerWeights& w, std::size_t layer, const PerturbSpec& spec,
                                   AttentionCache* cache = nullptr) {
  const std::size_t heads = w.head_count(), dh = w.head_dim();
  if (x_q.cols() != w.model_dim() || x_k.cols() != w.model_dim() || x_v.cols() != w.model_dim())
    throw DimensionError("attention input width does not match model dim " + std::to_string(w.model_dim()));
  check_heads_in_range(spec, layer, heads);

  Tensor q = matmul(x_q, stack_heads(w.wq));
  Tensor k = matmul(x_k, stack_heads(w.wk));
  Tensor v = matmul(x_v, stack_heads(w.wv));

  Tensor heads_out;
  std::vector<Tensor> maps;
  if (spec.bypasses_layer(layer)) {
    heads_out = v;
  } else {
    heads_out = Tensor::matrix(x_q.rows(), heads * dh);
    maps.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor qh = column_slice(q, h * dh, dh);
      const Tensor kh = column_slice(k, h * dh, dh);
      Tensor a = attention_map(qh, kh);
      if (spec.targets({layer, h})) a = perturb_map(spec, a, qh, kh);
      set_column_slice(heads_out, h * dh, matmul(a, column_slice(v, h * dh, dh)));
      maps.push_back(std::move(a));
    }
  }
  Tensor out = matmul(heads_out, w.wo);
  if (cache != nullptr) {
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->maps = std::move(maps);
    cache->heads_out = std::move(heads_out);
  }
  return out;
}

}  // namespace headlab
