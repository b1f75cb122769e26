#pragma once

// Image-statistic objectives used as the selection target of the head search.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "headlab/dit.hpp"
#include "headlab/error.hpp"
#include "headlab/synth.hpp"
#include "headlab/tensor.hpp"

namespace headlab {

enum class ObjectiveKind { brightness, darkness, sharpness, h_symmetry, template_corr, class_consistency };

struct ObjectiveId {
  ObjectiveKind kind = ObjectiveKind::brightness;
  std::size_t template_class = 0;  // template_corr only

  friend bool operator==(const ObjectiveId&, const ObjectiveId&) = default;
};

inline std::string to_string(const ObjectiveId& id) {
  switch (id.kind) {
    case ObjectiveKind::brightness: return "brightness";
    case ObjectiveKind::darkness: return "darkness";
    case ObjectiveKind::sharpness: return "sharpness";
    case ObjectiveKind::h_symmetry: return "h_symmetry";
    case ObjectiveKind::template_corr: return "template_corr:" + std::to_string(id.template_class);
    case ObjectiveKind::class_consistency: return "class_consistency";
  }
  return "brightness";
}

/// Accepts "brightness", "darkness", "sharpness", "h_symmetry",
/// "class_consistency" and "template_corr:<class>".
inline std::optional<ObjectiveId> parse_objective(std::string_view text) {
  static constexpr std::pair<std::string_view, ObjectiveKind> plain[] = {
      {"brightness", ObjectiveKind::brightness},   {"darkness", ObjectiveKind::darkness},
      {"sharpness", ObjectiveKind::sharpness},     {"h_symmetry", ObjectiveKind::h_symmetry},
      {"class_consistency", ObjectiveKind::class_consistency},
  };
  for (const auto& [name, kind] : plain)
    if (text == name) return ObjectiveId{kind, 0};
  constexpr std::string_view prefix = "template_corr:";
  if (text.substr(0, prefix.size()) == prefix) {
    const std::string_view digits = text.substr(prefix.size());
    if (digits.empty() || digits.size() > 3) return std::nullopt;
    std::size_t cls = 0;
    for (char c : digits) {
      if (c < '0' || c > '9') return std::nullopt;
      cls = cls * 10 + static_cast<std::size_t>(c - '0');
    }
    if (cls >= kSynthClassCount) return std::nullopt;
    return ObjectiveId{ObjectiveKind::template_corr, cls};
  }
  return std::nullopt;
}

inline double brightness(const Tensor& img) { return mean(img); }

/// Mean over pixels of |right difference| + |down difference| (differences off the edge count as 0).
inline double sharpness(const Tensor& img) {
  const std::size_t h = img.rows(), w = img.cols();
  double s = 0.0;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c + 1 < w; ++c) s += std::abs(img(r, c + 1) - img(r, c));
  for (std::size_t r = 0; r + 1 < h; ++r)
    for (std::size_t c = 0; c < w; ++c) s += std::abs(img(r + 1, c) - img(r, c));
  return s / static_cast<double>(h * w);
}

/// Negative mean absolute difference to the left-right mirror image; 0 means symmetric.
inline double h_symmetry(const Tensor& img) {
  const std::size_t h = img.rows(), w = img.cols();
  double s = 0.0;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) s += std::abs(img(r, c) - img(r, w - 1 - c));
  return 0.0 - s / static_cast<double>(h * w);
}

/// Pearson correlation; 0 when either input is constant.
inline double pearson(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "pearson");
  const double n = static_cast<double>(a.size());
  const double ma = sum(a) / n, mb = sum(b) / n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

inline const std::vector<Tensor>& class_templates() {
  static const std::vector<Tensor> t = templates();
  return t;
}

/// Class whose template correlates best with `img` (ties: lowest id).
inline std::size_t nearest_template(const Tensor& img) {
  const auto& tpl = class_templates();
  std::size_t best = 0;
  double best_r = pearson(img, tpl[0]);
  for (std::size_t c = 1; c < tpl.size(); ++c) {
    const double r = pearson(img, tpl[c]);
    if (r > best_r) {
      best_r = r;
      best = c;
    }
  }
  return best;
}

inline double score(const ObjectiveId& obj, const Tensor& img, ClassLabel cond) {
  if (img.rank() != 2) throw DimensionError("objective expects an image, got " + shape_string(img.shape()));
  switch (obj.kind) {
    case ObjectiveKind::brightness: return brightness(img);
    case ObjectiveKind::darkness: return -brightness(img);
    case ObjectiveKind::sharpness: return sharpness(img);
    case ObjectiveKind::h_symmetry: return h_symmetry(img);
    case ObjectiveKind::template_corr:
      if (obj.template_class >= kSynthClassCount) throw DomainError("template_corr needs a valid class id");
      return pearson(img, class_templates()[obj.template_class]);
    case ObjectiveKind::class_consistency:
      if (!cond) throw DomainError("class_consistency needs a class condition, got the null class");
      return nearest_template(img) == *cond ? 1.0 : 0.0;
  }
  return 0.0;
}

}  // namespace headlab
