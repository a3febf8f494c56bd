#pragma once

// Shared helpers for the unit and acceptance suites: random data, explicit
// reference computations, and an instrumented scalar that counts multiplies.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "krona/matrix.hpp"

namespace krona::testkit {

inline Matrix<double> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng,
                                    double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Matrix<double> m(r, c);
  for (double& v : m.data()) v = d(rng);
  return m;
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

// r x c matrix of rank exactly k (almost surely): product of random factors.
inline Matrix<double> random_rank(std::size_t r, std::size_t c, std::size_t k,
                                  std::mt19937_64& rng) {
  if (k == 0) return Matrix<double>(r, c);
  Matrix<double> u = random_matrix(r, k, rng), v = random_matrix(k, c, rng);
  Matrix<double> out(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t p = 0; p < k; ++p) out(i, j) += u(i, p) * v(p, j);
  return out;
}

// Dense y = M x by the textbook triple loop; independent of library kernels.
inline std::vector<double> dense_apply(const Matrix<double>& m, const std::vector<double>& x) {
  std::vector<double> y(m.rows(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) y[i] += m(i, j) * x[j];
  return y;
}

// Dense Y = X M.
inline Matrix<double> dense_rowmul(const Matrix<double>& x, const Matrix<double>& m) {
  Matrix<double> y(x.rows(), m.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < x.cols(); ++k) acc += x(i, k) * m(k, j);
      y(i, j) = acc;
    }
  return y;
}

// Block-by-block Kronecker reconstruction straight from the definition.
inline Matrix<double> reference_kron(const Matrix<double>& a, const Matrix<double>& b) {
  Matrix<double> w(a.rows() * b.rows(), a.cols() * b.cols());
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j)
      w(i, j) = a(i / b.rows(), j / b.cols()) * b(i % b.rows(), j % b.cols());
  return w;
}

inline double rel_l2(const std::vector<double>& got, const std::vector<double>& ref) {
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < ref.size(); ++k) {
    num += (got[k] - ref[k]) * (got[k] - ref[k]);
    den += ref[k] * ref[k];
  }
  return den == 0.0 ? std::sqrt(num) : std::sqrt(num / den);
}

inline double rel_l2(const Matrix<double>& got, const Matrix<double>& ref) {
  return rel_l2(std::vector<double>(got.data().begin(), got.data().end()),
                std::vector<double>(ref.data().begin(), ref.data().end()));
}

// Scalar that counts every multiplication it takes part in.
struct Counted {
  double v = 0.0;
  static inline std::uint64_t mults = 0;

  Counted() = default;
  Counted(double x) : v(x) {}  // NOLINT(google-explicit-constructor)

  friend Counted operator*(Counted a, Counted b) {
    ++mults;
    return {a.v * b.v};
  }
  friend Counted operator+(Counted a, Counted b) { return {a.v + b.v}; }
  Counted& operator+=(Counted o) {
    v += o.v;
    return *this;
  }
  Counted& operator*=(Counted o) {
    ++mults;
    v *= o.v;
    return *this;
  }
  friend bool operator==(Counted a, Counted b) { return a.v == b.v; }
};

}  // namespace krona::testkit
