#pragma once

// Dense row-major float64 tensors and the handful of kernels the toy DiT needs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "headlab/error.hpp"

namespace headlab {

using Shape = std::vector<std::size_t>;

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    data_.assign(checked_count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_count(shape_) != data_.size()) {
      throw DimensionError("tensor shape " + shape_string(shape_) + " does not match " +
                           std::to_string(data_.size()) + " elements");
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged row list");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  double* row(std::size_t r) { return data_.data() + r * cols(); }
  const double* row(std::size_t r) const { return data_.data() + r * cols(); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  /// Exact element-wise equality (shape and values, -0 == +0).
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t checked_count(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
      n *= e;
    }
    return n;
  }

  Shape shape_;
  std::vector<double> data_;
};

namespace detail {

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + " must be a matrix, got " + shape_string(t.shape()));
}

// Eight doubles; unaligned, may alias plain double storage.
typedef double v8d __attribute__((vector_size(64)));
typedef double v8d_unaligned __attribute__((vector_size(64), aligned(8), may_alias));

[[gnu::always_inline]] inline v8d load8(const double* p) { return *reinterpret_cast<const v8d_unaligned*>(p); }
[[gnu::always_inline]] inline void store8(double* p, v8d v) { *reinterpret_cast<v8d_unaligned*>(p) = v; }

// One R x (8V) tile of c = a * b. Every output element sums p = 0..k-1 in
// ascending order, so values do not depend on how the output is tiled.
template <std::size_t R, std::size_t V>
inline void gemm_tile(const double* __restrict a, std::size_t k, const double* __restrict b, std::size_t n,
                      double* __restrict c) {
  v8d acc[R][V] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * n;
    v8d bv[V];
#pragma GCC unroll 4
    for (std::size_t v = 0; v < V; ++v) bv[v] = load8(brow + 8 * v);
#pragma GCC unroll 4
    for (std::size_t r = 0; r < R; ++r) {
      const double av = a[r * k + p];
#pragma GCC unroll 4
      for (std::size_t v = 0; v < V; ++v) acc[r][v] += av * bv[v];
    }
  }
#pragma GCC unroll 4
  for (std::size_t r = 0; r < R; ++r)
#pragma GCC unroll 4
    for (std::size_t v = 0; v < V; ++v) store8(c + r * n + 8 * v, acc[r][v]);
}

inline double gemm_dot(const double* a, std::size_t k, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t p = 0; p < k; ++p) s += a[p] * b[p * n];
  return s;
}

template <std::size_t R>
inline void gemm_rows(const double* a, const double* b, double* c, std::size_t k, std::size_t n) {
  std::size_t j = 0;
  for (; j + 32 <= n; j += 32) gemm_tile<R, 4>(a, k, b + j, n, c + j);
  for (; j + 8 <= n; j += 8) gemm_tile<R, 1>(a, k, b + j, n, c + j);
  for (; j < n; ++j)
    for (std::size_t r = 0; r < R; ++r) c[r * n + j] = gemm_dot(a + r * k, k, b + j, n);
}

/// c[m x n] = a[m x k] * b[k x n], all row-major and contiguous.
inline void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_rows<4>(a + i * k, b, c + i * n, k, n);
  for (; i < m; ++i) gemm_rows<1>(a + i * k, b, c + i * n, k, n);
}

}  // namespace detail

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose operand");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor t = Tensor::matrix(n, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul lhs");
  detail::require_matrix(b, "matmul rhs");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul inner extents disagree: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor c = Tensor::matrix(a.rows(), b.cols());
  detail::gemm(a.data().data(), b.data().data(), c.data().data(), a.rows(), a.cols(), b.cols());
  return c;
}

/// a * b^T (b transposed into a temporary first).
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul(a, transpose(b)); }

/// a^T * b.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) { return matmul(transpose(a), b); }

inline void softmax_row_inplace(double* row, std::size_t n) {
  double mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

/// Row-wise softmax with per-row max subtraction.
inline Tensor softmax_rows(Tensor logits) {
  detail::require_matrix(logits, "softmax_rows operand");
  for (std::size_t i = 0; i < logits.rows(); ++i) softmax_row_inplace(logits.row(i), logits.cols());
  return logits;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row normalization to zero mean and unit variance, then gain * x + bias.
inline Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps) {
  detail::require_matrix(x, "layernorm input");
  const std::size_t n = x.rows(), d = x.cols();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layernorm affine extents " + shape_string(gain.shape()) + "/" +
                         shape_string(bias.shape()) + " do not match row width " + std::to_string(d));
  }
  Tensor y = Tensor::matrix(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xr = x.row(i);
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    double* yr = y.row(i);
    for (std::size_t j = 0; j < d; ++j) yr[j] = (xr[j] - mean) * rstd * gain[j] + bias[j];
  }
  return y;
}

// Elementwise helpers. Shapes must agree exactly; there is no broadcasting.

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
}

inline Tensor operator+(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "subtract");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

inline Tensor operator*(double s, const Tensor& a) {
  Tensor c = a;
  for (double& v : c.data()) v *= s;
  return c;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  return c;
}

inline Tensor& operator+=(Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add-assign");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

/// Adds `vec` (length cols) to every row of `m`.
inline void add_row_vector(Tensor& m, const Tensor& vec) {
  if (vec.size() != m.cols()) {
    throw DimensionError("row vector " + shape_string(vec.shape()) + " vs matrix " + shape_string(m.shape()));
  }
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double* r = m.row(i);
    for (std::size_t j = 0; j < m.cols(); ++j) r[j] += vec[j];
  }
}

inline double sum(const Tensor& a) { return std::accumulate(a.data().begin(), a.data().end(), 0.0); }

inline double mean(const Tensor& a) { return sum(a) / static_cast<double>(a.size()); }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double l2_distance(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "l2_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// Copies columns [col0, col0 + width) of a matrix.
inline Tensor column_slice(const Tensor& m, std::size_t col0, std::size_t width) {
  if (col0 + width > m.cols()) throw DimensionError("column slice out of range");
  Tensor s = Tensor::matrix(m.rows(), width);
  for (std::size_t i = 0; i < m.rows(); ++i) std::copy_n(m.row(i) + col0, width, s.row(i));
  return s;
}

/// Writes `src` into columns [col0, col0 + src.cols()) of `dst`.
inline void set_column_slice(Tensor& dst, std::size_t col0, const Tensor& src) {
  if (src.rows() != dst.rows() || col0 + src.cols() > dst.cols()) throw DimensionError("column slice out of range");
  for (std::size_t i = 0; i < src.rows(); ++i) std::copy_n(src.row(i), src.cols(), dst.row(i) + col0);
}

/// Copies rows [row0, row0 + count).
inline Tensor row_slice(const Tensor& m, std::size_t row0, std::size_t count) {
  if (row0 + count > m.rows()) throw DimensionError("row slice out of range");
  Tensor s = Tensor::matrix(count, m.cols());
  std::copy_n(m.row(row0), count * m.cols(), s.row(0));
  return s;
}

}  // namespace headlab
