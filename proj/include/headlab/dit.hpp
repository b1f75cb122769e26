#pragma once

// Micro diffusion transformer: patch tokens plus one class token, additive
// sinusoidal time embedding, pre-LN transformer blocks, linear patch decoder.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "headlab/attention.hpp"
#include "headlab/error.hpp"
#include "headlab/rng.hpp"
#include "headlab/tensor.hpp"

namespace headlab {

/// Conditioning label: a class id, or nullopt for the unconditional (null) token.
using ClassLabel = std::optional<std::size_t>;

struct DitConfig {
  std::size_t image_size = 16;
  std::size_t channels = 1;
  std::size_t patch = 2;
  std::size_t layers = 4;
  std::size_t heads_per_layer = 4;
  std::size_t model_dim = 64;
  std::size_t head_dim = 16;
  std::size_t mlp_ratio = 4;
  std::size_t class_count = 4;

  std::size_t grid() const { return image_size / patch; }
  std::size_t image_tokens() const { return grid() * grid(); }
  std::size_t sequence_length() const { return image_tokens() + 1; }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t mlp_dim() const { return mlp_ratio * model_dim; }
  std::size_t head_count() const { return layers * heads_per_layer; }
  std::size_t null_class() const { return class_count; }

  void validate() const {
    if (image_size == 0 || patch == 0 || layers == 0 || heads_per_layer == 0 || head_dim == 0 || mlp_ratio == 0 ||
        class_count == 0)
      throw DomainError("model config extents must be positive");
    if (channels != 1) throw DomainError("only single-channel images are supported");
    if (model_dim != heads_per_layer * head_dim)
      throw DomainError("model_dim must equal heads_per_layer * head_dim");
    if (image_size % patch != 0) throw DomainError("image_size must be divisible by patch");
    if (model_dim % 2 != 0) throw DomainError("model_dim must be even for the sinusoidal time embedding");
  }

  friend bool operator==(const DitConfig&, const DitConfig&) = default;
};

/// Every (layer, head) pair in lexicographic order.
inline std::vector<HeadId> all_heads(const DitConfig& cfg) {
  std::vector<HeadId> ids;
  for (std::size_t l = 0; l < cfg.layers; ++l)
    for (std::size_t h = 0; h < cfg.heads_per_layer; ++h) ids.push_back({l, h});
  return ids;
}

struct BlockWeights {
  Tensor ln1_gain, ln1_bias;
  AttentionLayerWeights attn;
  Tensor ln2_gain, ln2_bias;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct DitWeights {
  DitConfig config;
  Tensor patch_w, patch_b, pos;
  Tensor class_emb;  // (class_count + 1) x d, last row is the null class
  Tensor time_w1, time_b1, time_w2, time_b2;
  std::vector<BlockWeights> blocks;
  Tensor final_gain, final_bias;
  Tensor out_w, out_b;

  /// Visits every parameter tensor in canonical order as f(name, tensor).
  template <class Self, class F>
  static void visit_impl(Self& self, F&& f) {
    f("patch_w", self.patch_w);
    f("patch_b", self.patch_b);
    f("pos", self.pos);
    f("class_emb", self.class_emb);
    f("time_w1", self.time_w1);
    f("time_b1", self.time_b1);
    f("time_w2", self.time_w2);
    f("time_b2", self.time_b2);
    for (std::size_t l = 0; l < self.blocks.size(); ++l) {
      auto& b = self.blocks[l];
      const std::string p = "blocks." + std::to_string(l) + ".";
      f(p + "ln1_gain", b.ln1_gain);
      f(p + "ln1_bias", b.ln1_bias);
      for (std::size_t h = 0; h < b.attn.wq.size(); ++h) f(p + "attn.wq." + std::to_string(h), b.attn.wq[h]);
      for (std::size_t h = 0; h < b.attn.wk.size(); ++h) f(p + "attn.wk." + std::to_string(h), b.attn.wk[h]);
      for (std::size_t h = 0; h < b.attn.wv.size(); ++h) f(p + "attn.wv." + std::to_string(h), b.attn.wv[h]);
      f(p + "attn.wo", b.attn.wo);
      f(p + "ln2_gain", b.ln2_gain);
      f(p + "ln2_bias", b.ln2_bias);
      f(p + "mlp_w1", b.mlp_w1);
      f(p + "mlp_b1", b.mlp_b1);
      f(p + "mlp_w2", b.mlp_w2);
      f(p + "mlp_b2", b.mlp_b2);
    }
    f("final_gain", self.final_gain);
    f("final_bias", self.final_bias);
    f("out_w", self.out_w);
    f("out_b", self.out_b);
  }

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, std::forward<F>(f));
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, std::forward<F>(f));
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  /// Correctly shaped weights with every entry zero (also used as a gradient buffer).
  static DitWeights zeros(const DitConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.model_dim, dh = cfg.head_dim, m = cfg.mlp_dim(), pd = cfg.patch_dim();
    DitWeights w;
    w.config = cfg;
    w.patch_w = Tensor::matrix(pd, d);
    w.patch_b = Tensor({d});
    w.pos = Tensor::matrix(cfg.image_tokens(), d);
    w.class_emb = Tensor::matrix(cfg.class_count + 1, d);
    w.time_w1 = Tensor::matrix(d, d);
    w.time_b1 = Tensor({d});
    w.time_w2 = Tensor::matrix(d, d);
    w.time_b2 = Tensor({d});
    w.blocks.resize(cfg.layers);
    for (auto& b : w.blocks) {
      b.ln1_gain = Tensor({d});
      b.ln1_bias = Tensor({d});
      b.attn.wq.assign(cfg.heads_per_layer, Tensor::matrix(d, dh));
      b.attn.wk.assign(cfg.heads_per_layer, Tensor::matrix(d, dh));
      b.attn.wv.assign(cfg.heads_per_layer, Tensor::matrix(d, dh));
      b.attn.wo = Tensor::matrix(cfg.heads_per_layer * dh, d);
      b.ln2_gain = Tensor({d});
      b.ln2_bias = Tensor({d});
      b.mlp_w1 = Tensor::matrix(d, m);
      b.mlp_b1 = Tensor({m});
      b.mlp_w2 = Tensor::matrix(m, d);
      b.mlp_b2 = Tensor({d});
    }
    w.final_gain = Tensor({d});
    w.final_bias = Tensor({d});
    w.out_w = Tensor::matrix(d, pd);
    w.out_b = Tensor({pd});
    return w;
  }

  bool all_finite() const {
    bool ok = true;
    visit([&](const std::string&, const Tensor& t) { ok = ok && t.all_finite(); });
    return ok;
  }

  friend bool operator==(const DitWeights& a, const DitWeights& b) {
    if (!(a.config == b.config)) return false;
    std::vector<const Tensor*> ta, tb;
    a.visit([&](const std::string&, const Tensor& t) { ta.push_back(&t); });
    b.visit([&](const std::string&, const Tensor& t) { tb.push_back(&t); });
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i)
      if (!(*ta[i] == *tb[i])) return false;
    return true;
  }
};

inline constexpr double kInitStd = 0.02;

/// Projections and embeddings ~ N(0, 0.02^2) from `seed`, layernorm gains 1,
/// biases 0, output projection 0.
inline DitWeights init_weights(const DitConfig& cfg, std::uint64_t seed) {
  DitWeights w = DitWeights::zeros(cfg);
  Rng rng(seed);
  auto fill = [&](Tensor& t) {
    for (double& v : t.data()) v = kInitStd * rng.normal();
  };
  fill(w.patch_w);
  fill(w.pos);
  fill(w.class_emb);
  fill(w.time_w1);
  fill(w.time_w2);
  for (auto& b : w.blocks) {
    for (auto& t : b.attn.wq) fill(t);
    for (auto& t : b.attn.wk) fill(t);
    for (auto& t : b.attn.wv) fill(t);
    fill(b.attn.wo);
    fill(b.mlp_w1);
    fill(b.mlp_w2);
    for (double& v : b.ln1_gain.data()) v = 1.0;
    for (double& v : b.ln2_gain.data()) v = 1.0;
  }
  for (double& v : w.final_gain.data()) v = 1.0;
  return w;
}

// ---------------------------------------------------------------------------
// Patch layout: token (r / p) * grid + (c / p), slot (r % p) * p + (c % p).

inline Tensor patchify(const Tensor& img, std::size_t patch) {
  if (img.rank() != 2 || img.rows() != img.cols() || img.rows() % patch != 0)
    throw DimensionError("patchify expects a square image divisible by the patch size, got " +
                         shape_string(img.shape()));
  const std::size_t size = img.rows(), grid = size / patch;
  Tensor tokens = Tensor::matrix(grid * grid, patch * patch);
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c)
      tokens((r / patch) * grid + c / patch, (r % patch) * patch + c % patch) = img(r, c);
  return tokens;
}

inline Tensor unpatchify(const Tensor& tokens, std::size_t patch) {
  const std::size_t grid = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(tokens.rows()))));
  if (tokens.rank() != 2 || grid * grid != tokens.rows() || tokens.cols() != patch * patch)
    throw DimensionError("unpatchify expects grid^2 x patch^2 tokens, got " + shape_string(tokens.shape()));
  const std::size_t size = grid * patch;
  Tensor img = Tensor::matrix(size, size);
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c)
      img(r, c) = tokens((r / patch) * grid + c / patch, (r % patch) * patch + c % patch);
  return img;
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities.

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

// tanh through a single exp; glibc's tanh is several times slower and this
// sits on the hot path of every MLP.
inline double tanh_fast(double z) { return 1.0 - 2.0 / (std::exp(2.0 * z) + 1.0); }

inline double gelu_tanh_arg(double x) { return tanh_fast(kGeluC * (x + 0.044715 * x * x * x)); }

/// Tanh-approximated GELU.
inline double gelu(double x) { return 0.5 * x * (1.0 + gelu_tanh_arg(x)); }

/// d gelu / dx given th = gelu_tanh_arg(x).
inline double gelu_grad(double x, double th) {
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

inline double gelu_grad(double x) { return gelu_grad(x, gelu_tanh_arg(x)); }

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

/// [cos(1000 t f_i), sin(1000 t f_i)], f_i = 10000^(-i / (dim/2)).
inline Tensor time_features(double t, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor f = Tensor::matrix(1, dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double arg = 1000.0 * t * freq;
    f(0, i) = std::cos(arg);
    f(0, half + i) = std::sin(arg);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Forward pass.

struct BlockCache {
  Tensor x_in;  // residual stream entering the block
  Tensor ln1_out;
  AttentionCache attn;
  Tensor x_mid;  // after the attention residual
  Tensor ln2_out;
  Tensor mlp_pre;   // before GELU
  Tensor mlp_tanh;  // GELU's inner tanh, reused by the backward pass
  Tensor mlp_act;
};

struct ForwardCache {
  Tensor tokens;  // image patches, N_img x patch_dim
  std::size_t class_row = 0;
  Tensor time_in, time_pre, time_act;  // sinusoid, first linear, SiLU
  std::vector<BlockCache> blocks;
  Tensor x_final;  // residual stream before the final layernorm
  Tensor ln_final;
};

inline std::size_t class_row(const DitConfig& cfg, ClassLabel cond) {
  if (!cond) return cfg.null_class();
  if (*cond >= cfg.class_count)
    throw DomainError("class id " + std::to_string(*cond) + " out of range [0," + std::to_string(cfg.class_count) + ")");
  return *cond;
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  add_row_vector(y, b);
  return y;
}

/// Velocity prediction for one image. Deterministic; never mutates weights.
inline Tensor dit_forward(const DitWeights& w, const Tensor& x_t, double t, ClassLabel cond,
                          const PerturbSpec& spec = PerturbSpec::none(), ForwardCache* cache = nullptr) {
  const DitConfig& cfg = w.config;
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("time must lie in [0,1], got " + std::to_string(t));
  if (x_t.rank() != 2 || x_t.rows() != cfg.image_size || x_t.cols() != cfg.image_size)
    throw DimensionError("input image " + shape_string(x_t.shape()) + " does not match image_size " +
                         std::to_string(cfg.image_size));
  const std::size_t crow = class_row(cfg, cond);
  for (const HeadId& id : spec.heads)
    if (spec.perturbs_heads() && id.layer >= cfg.layers)
      throw DomainError("head " + to_string(id) + " out of range: model has " + std::to_string(cfg.layers) + " layers");
  for (std::size_t l : spec.pag_layers)
    if (l >= cfg.layers) throw DomainError("layer " + std::to_string(l) + " out of range");

  const std::size_t d = cfg.model_dim, n = cfg.sequence_length();
  Tensor tokens = patchify(x_t, cfg.patch);

  Tensor time_in = time_features(t, d);
  Tensor time_pre = linear(time_in, w.time_w1, w.time_b1);
  Tensor time_act = time_pre;
  for (double& v : time_act.data()) v = silu(v);
  const Tensor temb = linear(time_act, w.time_w2, w.time_b2);

  Tensor x = Tensor::matrix(n, d);
  {
    Tensor emb = linear(tokens, w.patch_w, w.patch_b);
    emb += w.pos;
    std::copy_n(w.class_emb.row(crow), d, x.row(0));
    std::copy_n(emb.row(0), emb.size(), x.row(1));
    add_row_vector(x, temb);
  }

  if (cache) cache->blocks.resize(cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const BlockWeights& b = w.blocks[l];
    BlockCache* bc = cache ? &cache->blocks[l] : nullptr;
    Tensor ln1 = layernorm(x, b.ln1_gain, b.ln1_bias);
    Tensor att = multi_head_attention(ln1, ln1, ln1, b.attn, l, spec, bc ? &bc->attn : nullptr);
    Tensor x_mid = x + att;
    Tensor ln2 = layernorm(x_mid, b.ln2_gain, b.ln2_bias);
    Tensor pre = linear(ln2, b.mlp_w1, b.mlp_b1);
    Tensor act = pre, th = pre;
    for (std::size_t i = 0; i < act.size(); ++i) {
      th[i] = gelu_tanh_arg(pre[i]);
      act[i] = 0.5 * pre[i] * (1.0 + th[i]);
    }
    Tensor x_next = x_mid + linear(act, b.mlp_w2, b.mlp_b2);
    if (bc) {
      bc->x_in = std::move(x);
      bc->ln1_out = std::move(ln1);
      bc->x_mid = std::move(x_mid);
      bc->ln2_out = std::move(ln2);
      bc->mlp_pre = std::move(pre);
      bc->mlp_tanh = std::move(th);
      bc->mlp_act = std::move(act);
    }
    x = std::move(x_next);
  }

  Tensor lnf = layernorm(x, w.final_gain, w.final_bias);
  const Tensor y = linear(lnf, w.out_w, w.out_b);
  Tensor out_tokens = row_slice(y, 1, cfg.image_tokens());

  if (cache) {
    cache->tokens = std::move(tokens);
    cache->class_row = crow;
    cache->time_in = std::move(time_in);
    cache->time_pre = std::move(time_pre);
    cache->time_act = std::move(time_act);
    cache->x_final = std::move(x);
    cache->ln_final = std::move(lnf);
  }
  return unpatchify(out_tokens, cfg.patch);
}

}  // namespace headlab
