#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "krona/matrix.hpp"

namespace krona {

// Block (i, j) of the result is a(i, j) * b.
template <class T>
Matrix<T> kron(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.empty() || b.empty()) throw DimensionError("kron: empty operand");
  const std::size_t p = b.rows(), q = b.cols();
  Matrix<T> out(a.rows() * p, a.cols() * q);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const T aij = a(i, j);
      for (std::size_t r = 0; r < p; ++r)
        for (std::size_t c = 0; c < q; ++c) out(i * p + r, j * q + c) = aij * b(r, c);
    }
  return out;
}

// Reshape a length m*n vector into an m x n matrix, filling column by column.
template <class T>
Matrix<T> eta(std::span<const T> x, std::size_t m, std::size_t n) {
  if (m == 0 || n == 0 || x.size() != m * n) {
    throw DimensionError("eta: vector of length " + std::to_string(x.size()) +
                         " cannot fill " + Matrix<T>::shape_string(m, n));
  }
  Matrix<T> out(m, n);
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t r = 0; r < m; ++r) out(r, c) = x[c * m + r];
  return out;
}

// Stack the columns of y into one vector; inverse of eta.
template <class T>
std::vector<T> gamma(const Matrix<T>& y) {
  std::vector<T> out;
  out.reserve(y.size());
  for (std::size_t c = 0; c < y.cols(); ++c)
    for (std::size_t r = 0; r < y.rows(); ++r) out.push_back(y(r, c));
  return out;
}

/// Kronecker factor pair (A_k: a1 x a2, B_k: b1 x b2).
///
/// As a layer acting on row activations it maps d_in = a1*b1 features to
/// d_out = a2*b2 features: y = x (A_k kron B_k).
template <class T = double>
struct KronFactorPair {
  Matrix<T> a;
  Matrix<T> b;

  KronFactorPair() = default;
  KronFactorPair(Matrix<T> a_, Matrix<T> b_) : a(std::move(a_)), b(std::move(b_)) {
    if (a.empty() || b.empty()) throw DimensionError("KronFactorPair: empty factor");
  }

  std::size_t a1() const noexcept { return a.rows(); }
  std::size_t a2() const noexcept { return a.cols(); }
  std::size_t b1() const noexcept { return b.rows(); }
  std::size_t b2() const noexcept { return b.cols(); }
  std::size_t d_in() const noexcept { return a1() * b1(); }
  std::size_t d_out() const noexcept { return a2() * b2(); }
  std::size_t parameter_count() const noexcept { return a.size() + b.size(); }

  Matrix<T> reconstruct() const { return kron(a, b); }
};

/// (A kron B) x computed as gamma(B * eta_{b2 x a2}(x) * A^T), never forming
/// the product matrix. x has a2*b2 entries, the result a1*b1.
///
/// Multiplies: b1*b2*a2 for the first product, b1*a2*a1 for the second.
template <class T>
std::vector<T> kron_vec(const KronFactorPair<T>& pair, std::span<const T> x) {
  if (x.size() != pair.a2() * pair.b2()) {
    throw DimensionError("kron_vec: vector length " + std::to_string(x.size()) +
                         " does not match operator with " +
                         std::to_string(pair.a2() * pair.b2()) + " columns");
  }
  const Matrix<T> z = matmul(pair.b, eta(x, pair.b2(), pair.a2()));  // b1 x a2
  return gamma(matmul_nt(z, pair.a));                               // b1 x a1
}

namespace detail {

// Stage one of the row-form product for a single row x (length a1*b1):
// z (a2 x b1) = A^T R where R is x viewed as a row-major a1 x b1 matrix.
template <class T>
void kron_row_stage1(const Matrix<T>& a, std::size_t b1, const T* x, T* z) {
  const std::size_t a1 = a.rows(), a2 = a.cols();
  for (std::size_t k = 0; k < a2 * b1; ++k) z[k] = T{};
  for (std::size_t c = 0; c < a1; ++c) {
    const T* rrow = x + c * b1;
    for (std::size_t q = 0; q < a2; ++q) {
      const T av = a(c, q);
      T* zrow = z + q * b1;
      for (std::size_t r = 0; r < b1; ++r) zrow[r] += av * rrow[r];
    }
  }
}

// Stage two: y (a2 x b2, row-major, i.e. the output row) = z B.
template <class T>
void kron_row_stage2(const Matrix<T>& b, std::size_t a2, const T* z, T* y) {
  const std::size_t b1 = b.rows(), b2 = b.cols();
  for (std::size_t k = 0; k < a2 * b2; ++k) y[k] = T{};
  for (std::size_t q = 0; q < a2; ++q) {
    const T* zrow = z + q * b1;
    T* yrow = y + q * b2;
    for (std::size_t r = 0; r < b1; ++r) {
      const T zv = zrow[r];
      const T* brow = &b(r, 0);
      for (std::size_t p = 0; p < b2; ++p) yrow[p] += zv * brow[p];
    }
  }
}

inline void require_cols(std::size_t got, std::size_t want, const char* op) {
  if (got != want) {
    throw DimensionError(std::string(op) + ": input has " + std::to_string(got) +
                         " features, factor pair expects " + std::to_string(want));
  }
}

}  // namespace detail

// Single row form: x (A kron B) for x of length d_in.
template <class T>
std::vector<T> kron_row(const KronFactorPair<T>& pair, std::span<const T> x) {
  detail::require_cols(x.size(), pair.d_in(), "kron_row");
  std::vector<T> z(pair.a2() * pair.b1());
  std::vector<T> y(pair.d_out());
  detail::kron_row_stage1(pair.a, pair.b1(), x.data(), z.data());
  detail::kron_row_stage2(pair.b, pair.a2(), z.data(), y.data());
  return y;
}

/// X (A kron B) for a batch of row activations. Row i of the result is
/// A^T R_i B laid out row-major, where R_i is row i viewed as a1 x b1; this is
/// the transposed form of the column identity used by kron_vec. The
/// d_in x d_out operator is never materialized.
template <class T>
Matrix<T> kron_matmul(const Matrix<T>& x, const KronFactorPair<T>& pair) {
  detail::require_cols(x.cols(), pair.d_in(), "kron_matmul");
  const std::size_t n = x.rows();
  Matrix<T> out(n, pair.d_out());
  std::vector<T> z(pair.a2() * pair.b1());
  for (std::size_t i = 0; i < n; ++i) {
    detail::kron_row_stage1(pair.a, pair.b1(), &x(i, 0), z.data());
    detail::kron_row_stage2(pair.b, pair.a2(), z.data(), &out(i, 0));
  }
  return out;
}

struct MultCount {
  std::uint64_t naive = 0;      // dense multiply after reconstruction
  std::uint64_t vec_trick = 0;  // the two chained products of kron_vec
};

inline MultCount count_mults(std::uint64_t a1, std::uint64_t a2, std::uint64_t b1,
                             std::uint64_t b2) {
  return {a1 * b1 * a2 * b2, b1 * b2 * a2 + b1 * a2 * a1};
}

template <class T>
MultCount count_mults(const KronFactorPair<T>& pair) {
  return count_mults(pair.a1(), pair.a2(), pair.b1(), pair.b2());
}

}  // namespace krona
