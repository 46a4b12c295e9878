#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dspreg/errors.hpp"

namespace dspreg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array. The element count always equals the product of the
/// shape; a default-constructed tensor has shape [0] and holds nothing.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : shape_{0} {}

  explicit BasicTensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  static BasicTensor scalar(T v) { return BasicTensor({1, 1}, std::vector<T>{v}); }
  static BasicTensor vector(std::vector<T> v) {
    Shape s{v.size()};
    return BasicTensor(std::move(s), std::move(v));
  }
  static BasicTensor matrix(std::size_t rows, std::size_t cols, std::vector<T> v) {
    return BasicTensor({rows, cols}, std::move(v));
  }
  static BasicTensor zeros(std::size_t rows, std::size_t cols) { return BasicTensor({rows, cols}); }
  static BasicTensor identity(std::size_t n) {
    BasicTensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T{1};
    return t;
  }

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  // Rank-1 tensors read as a single row; rank-0/empty shapes are not matrices.
  [[nodiscard]] std::size_t rows() const noexcept { return rank() == 2 ? shape_[0] : 1; }
  [[nodiscard]] std::size_t cols() const noexcept {
    return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : size());
  }

  [[nodiscard]] std::span<T> data() noexcept { return data_; }
  [[nodiscard]] std::span<const T> data() const noexcept { return data_; }
  [[nodiscard]] const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  [[nodiscard]] BasicTensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  [[nodiscard]] BasicTensor row(std::size_t r) const {
    std::vector<T> v(data_.begin() + static_cast<std::ptrdiff_t>(r * cols()),
                     data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols()));
    return BasicTensor({1, cols()}, std::move(v));
  }

  [[nodiscard]] BasicTensor col(std::size_t c) const {
    BasicTensor out({rows()});
    for (std::size_t r = 0; r < rows(); ++r) out[r] = (*this)(r, c);
    return out;
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<double>;

namespace linalg {

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  BasicTensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T& av = a(i, p);
      for (std::size_t j = 0; j < n; ++j) c(i, j) += av * b(p, j);
    }
  return c;
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  BasicTensor<T> t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("add: size mismatch");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("sub: size mismatch");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

inline Tensor scaled(Tensor a, double s) {
  for (auto& v : a.data()) v *= s;
  return a;
}

inline double trace(const Tensor& a) {
  double t = 0.0;
  for (std::size_t i = 0; i < std::min(a.rows(), a.cols()); ++i) t += a(i, i);
  return t;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

inline double max_abs(std::span<const double> a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("max_abs_diff: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Max over entries of |a - b| / max(|a|, |b|, floor).
inline double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-8) {
  if (a.size() != b.size()) throw DimensionError("max_rel_diff: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    m = std::max(m, std::abs(a[i] - b[i]) / denom);
  }
  return m;
}

inline bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

/// Lower-triangular factor of a symmetric PSD matrix. Pivots that fall below
/// `tol` are treated as zero, so rank-deficient inputs are accepted.
inline Tensor cholesky_psd(const Tensor& a, double tol = 1e-12) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw DimensionError("cholesky: matrix not square");
  Tensor l({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t p = 0; p < j; ++p) d -= l(j, p) * l(j, p);
    if (d < -tol * std::max(1.0, std::abs(a(j, j)))) throw DataError("cholesky: matrix is not PSD");
    const double ljj = d > tol ? std::sqrt(d) : 0.0;
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t p = 0; p < j; ++p) s -= l(i, p) * l(j, p);
      l(i, j) = ljj > 0.0 ? s / ljj : 0.0;
    }
  }
  return l;
}

}  // namespace linalg
}  // namespace dspreg
