#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dualcba/errors.hpp"

namespace dcba::nd {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major float64 array. Math in this library is matrix math, so
/// every kernel below expects rank 2; scalars are 1x1.
class Tensor {
 public:
  Tensor() : shape_{0, 0} {}

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    data_.assign(count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != data_.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape_) + " does not match " +
                           std::to_string(data_.size()) + " values");
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("tensor: ragged row list");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor row(std::span<const double> values) {
    return Tensor({1, values.size()}, std::vector<double>(values.begin(), values.end()));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.size() > 1 ? shape_[1] : 1; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }
  double& operator[](std::size_t k) { return data_[k]; }
  double operator[](std::size_t k) const { return data_[k]; }

  /// Value of a 1x1 tensor.
  double item() const {
    if (data_.size() != 1) throw DimensionError("tensor: item() on " + shape_str(shape_));
    return data_[0];
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  Shape shape_;
  std::vector<double> data_;
};

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

/// Plain kernels. They never touch a tape; the graph layer calls them.
namespace kernel {

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += av * b(p, j);
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor out = Tensor::matrix(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

/// Shape of a 2-D broadcast; each dimension must match or be 1.
inline Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_matrix(a, op);
  require_matrix(b, op);
  auto dim = [&](std::size_t x, std::size_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " +
                         shape_str(b.shape()));
  };
  return {dim(a.rows(), b.rows()), dim(a.cols(), b.cols())};
}

template <class F>
Tensor binary(const Tensor& a, const Tensor& b, F f, const char* op) {
  const Shape s = broadcast_shape(a, b, op);
  Tensor out(s);
  const bool ar = a.rows() == 1, ac = a.cols() == 1, br = b.rows() == 1, bc = b.cols() == 1;
  for (std::size_t i = 0; i < s[0]; ++i)
    for (std::size_t j = 0; j < s[1]; ++j)
      out(i, j) = f(a(ar ? 0 : i, ac ? 0 : j), b(br ? 0 : i, bc ? 0 : j));
  return out;
}

template <class F>
Tensor unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = f(a[k]);
  return out;
}

inline Tensor sum_rows(const Tensor& a) {
  require_matrix(a, "sum_rows");
  Tensor out = Tensor::matrix(1, a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(0, j) += a(i, j);
  return out;
}

inline Tensor sum_cols(const Tensor& a) {
  require_matrix(a, "sum_cols");
  Tensor out = Tensor::matrix(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j);
    out(i, 0) = s;
  }
  return out;
}

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::scalar(s);
}

/// Broadcast `a` up to rows x cols.
inline Tensor expand(const Tensor& a, std::size_t rows, std::size_t cols) {
  return binary(a, Tensor::matrix(rows, cols), [](double x, double) { return x; }, "expand");
}

/// Sum `g` down to `target` (the adjoint of broadcasting).
inline Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  if (target.size() != 2) throw DimensionError("reduce_to: bad target " + shape_str(target));
  if (target[0] == 1 && target[1] == 1) return sum_all(g);
  if (target[0] == 1 && target[1] == g.cols()) return sum_rows(g);
  if (target[1] == 1 && target[0] == g.rows()) return sum_cols(g);
  throw DimensionError("reduce_to: cannot reduce " + shape_str(g.shape()) + " to " + shape_str(target));
}

inline Tensor gather_cols(const Tensor& a, std::span<const std::size_t> idx) {
  require_matrix(a, "gather_cols");
  Tensor out = Tensor::matrix(a.rows(), idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j)
    if (idx[j] >= a.cols()) throw IndexError("gather_cols: column " + std::to_string(idx[j]) + " out of range");
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < idx.size(); ++j) out(i, j) = a(i, idx[j]);
  return out;
}

/// Place the columns of `a` at positions `idx` of a zero matrix with `total`
/// columns; repeated indices accumulate.
inline Tensor scatter_cols(const Tensor& a, std::span<const std::size_t> idx, std::size_t total) {
  require_matrix(a, "scatter_cols");
  if (a.cols() != idx.size()) throw DimensionError("scatter_cols: index count differs from column count");
  Tensor out = Tensor::matrix(a.rows(), total);
  for (std::size_t j = 0; j < idx.size(); ++j)
    if (idx[j] >= total) throw IndexError("scatter_cols: column " + std::to_string(idx[j]) + " out of range");
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < idx.size(); ++j) out(i, idx[j]) += a(i, j);
  return out;
}

inline Tensor row_max(const Tensor& a) {
  require_matrix(a, "row_max");
  Tensor out = Tensor::matrix(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double m = a(i, 0);
    for (std::size_t j = 1; j < a.cols(); ++j) m = std::max(m, a(i, j));
    out(i, 0) = m;
  }
  return out;
}

/// Stack rows of `a` on top of rows of `b`.
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.size() == 0 && a.rows() == 0) return b;
  if (b.size() == 0 && b.rows() == 0) return a;
  if (a.cols() != b.cols()) throw DimensionError("concat_rows: column counts differ");
  std::vector<double> data(a.values());
  data.insert(data.end(), b.values().begin(), b.values().end());
  return Tensor({a.rows() + b.rows(), a.cols()}, std::move(data));
}

inline Tensor select_rows(const Tensor& a, std::span<const std::size_t> idx) {
  Tensor out = Tensor::matrix(idx.size(), a.cols());
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t j = 0; j < a.cols(); ++j) out(r, j) = a(idx[r], j);
  return out;
}

inline std::vector<std::size_t> argmax_rows(const Tensor& a) {
  std::vector<std::size_t> out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < a.cols(); ++j)
      if (a(i, j) > a(i, best)) best = j;
    out[i] = best;
  }
  return out;
}

inline Tensor axpy(double alpha, const Tensor& x, const Tensor& y) {
  if (!x.same_shape(y)) throw DimensionError("axpy: shape mismatch");
  Tensor out = y;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += alpha * x[k];
  return out;
}

inline double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("dot: size mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("max_abs_diff: size mismatch");
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

}  // namespace kernel
}  // namespace dcba::nd
