#pragma once

#include <Eigen/SVD>

#include "krona/matrix.hpp"

namespace krona {

// Number of singular values above tol * sigma_max.
template <class T>
std::size_t numeric_rank(const Matrix<T>& m, double tol) {
  if (!(tol > 0.0)) throw SpecError("numeric_rank: tol must be positive");
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      e(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = static_cast<double>(m(i, j));
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(e);
  if (svd.info() != Eigen::Success) throw NumericalError("numeric_rank: SVD did not converge");
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return 0;
  std::size_t r = 0;
  for (Eigen::Index k = 0; k < s.size(); ++k)
    if (s(k) > tol * s(0)) ++r;
  return r;
}

// Singular values in descending order.
template <class T>
std::vector<double> singular_values(const Matrix<T>& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      e(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = static_cast<double>(m(i, j));
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(e);
  if (svd.info() != Eigen::Success) throw NumericalError("singular_values: SVD did not converge");
  const auto& s = svd.singularValues();
  return {s.data(), s.data() + s.size()};
}

}  // namespace krona
