#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "krona/errors.hpp"

namespace krona {

// Dense 2-D array, row-major. T is normally double or float; the arithmetic
// templates below only use +, * and value-initialization so instrumented
// scalar types work as well.
template <class T = double>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (rows == 0 || cols == 0) {
      throw DimensionError("Matrix dimensions must be positive, got " +
                           shape_string(rows, cols));
    }
  }

  // Builds from user data; rejects non-finite entries.
  static Matrix from_data(std::size_t rows, std::size_t cols, std::vector<T> data) {
    Matrix m(rows, cols);
    if (data.size() != rows * cols) {
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match " + shape_string(rows, cols));
    }
    m.data_ = std::move(data);
    m.require_finite();
    return m;
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged initializer for Matrix");
      data.insert(data.end(), row.begin(), row.end());
    }
    return from_data(r, c, std::move(data));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::span<T> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const T> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // Same storage, new shape. Only valid when the element count is unchanged.
  Matrix reshaped(std::size_t rows, std::size_t cols) const& {
    Matrix out = *this;
    return std::move(out).reshaped(rows, cols);
  }
  Matrix reshaped(std::size_t rows, std::size_t cols) && {
    if (rows * cols != data_.size() || rows == 0) {
      throw DimensionError("cannot reshape " + shape() + " to " + shape_string(rows, cols));
    }
    rows_ = rows;
    cols_ = cols;
    return std::move(*this);
  }

  bool same_shape(const Matrix& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  std::string shape() const { return shape_string(rows_, cols_); }

  void require_finite() const {
    if constexpr (std::is_floating_point_v<T>) {
      for (const T& v : data_) {
        if (!std::isfinite(v)) throw NumericalError("non-finite entry in Matrix " + shape());
      }
    }
  }

  template <class U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t k = 0; k < data_.size(); ++k) out.data()[k] = static_cast<U>(data_[k]);
    return out;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  static std::string shape_string(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

namespace detail {

inline void require(bool ok, const char* op, const std::string& a, const std::string& b) {
  if (!ok) throw DimensionError(std::string(op) + ": incompatible shapes " + a + " and " + b);
}

}  // namespace detail

// C += A * B. Loop order i-k-j; every product is performed (no zero skipping)
// so multiply counts are data independent.
template <class T>
void matmul_accumulate(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  detail::require(a.cols() == b.rows() && c.rows() == a.rows() && c.cols() == b.cols(),
                  "matmul", a.shape(), b.shape());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    T* crow = &c(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a(i, p);
      const T* brow = &b(p, 0);
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.cols() == b.rows(), "matmul", a.shape(), b.shape());
  Matrix<T> c(a.rows(), b.cols());
  matmul_accumulate(a, b, c);
  return c;
}

// A^T * B without forming the transpose.
template <class T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.rows() == b.rows(), "matmul_tn", a.shape(), b.shape());
  Matrix<T> c(a.cols(), b.cols());
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = &b(p, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const T av = a(p, i);
      T* crow = &c(i, 0);
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// A * B^T without forming the transpose.
template <class T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.cols() == b.cols(), "matmul_nt", a.shape(), b.shape());
  Matrix<T> c(a.rows(), b.rows());
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  for (std::size_t i = 0; i < n; ++i) {
    const T* arow = &a(i, 0);
    for (std::size_t j = 0; j < m; ++j) {
      const T* brow = &b(j, 0);
      T acc{};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c(i, j) = acc;
    }
  }
  return c;
}

template <class T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

template <class T>
Matrix<T> operator+(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.same_shape(b), "add", a.shape(), b.shape());
  Matrix<T> c = a;
  for (std::size_t k = 0; k < c.size(); ++k) c.data()[k] += b.data()[k];
  return c;
}

template <class T>
Matrix<T> operator-(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.same_shape(b), "sub", a.shape(), b.shape());
  Matrix<T> c = a;
  for (std::size_t k = 0; k < c.size(); ++k) c.data()[k] -= b.data()[k];
  return c;
}

template <class T>
Matrix<T> operator*(T s, const Matrix<T>& a) {
  Matrix<T> c = a;
  for (T& v : c.data()) v *= s;
  return c;
}

template <class T>
T max_abs(const Matrix<T>& a) {
  T m{};
  for (const T& v : a.data()) m = std::max(m, static_cast<T>(std::abs(v)));
  return m;
}

template <class T>
T frobenius_sq(const Matrix<T>& a) {
  T s{};
  for (const T& v : a.data()) s += v * v;
  return s;
}

// max |a-b| / max(max|b|, tiny): relative deviation measured against the
// reference's scale.
template <class T>
double max_rel_diff(const Matrix<T>& a, const Matrix<T>& ref) {
  detail::require(a.same_shape(ref), "max_rel_diff", a.shape(), ref.shape());
  double num = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k)
    num = std::max(num, std::abs(static_cast<double>(a.data()[k]) -
                                 static_cast<double>(ref.data()[k])));
  const double den = std::max(static_cast<double>(max_abs(ref)), 1e-300);
  return num / den;
}

template <class T>
std::string to_string(const Matrix<T>& m) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < m.rows(); ++i) {
    os << (i ? ", [" : "[");
    for (std::size_t j = 0; j < m.cols(); ++j) os << (j ? ", " : "") << m(i, j);
    os << "]";
  }
  os << "]";
  return os.str();
}

}  // namespace krona
