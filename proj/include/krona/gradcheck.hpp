#pragma once

#include <algorithm>
#include <cmath>

#include "krona/autograd.hpp"

namespace krona {

/// Central-difference check of d(loss)/d(param) for every coordinate of a
/// parameter leaf. The graph must already hold a loss (see Graph::backward);
/// it is left with its original values and gradients on return.
///
/// Returns max over coordinates of |analytic - numeric| /
/// max(|analytic|, |numeric|, 1e-12).
template <class T>
double finite_diff_check(Graph<T>& graph, Var param, double eps) {
  if (!(eps > 0.0)) throw SpecError("finite_diff_check: eps must be positive");
  const Var loss = graph.loss();
  if (!loss.valid()) throw GraphError("finite_diff_check: run backward(loss) first");
  if (!graph.trainable(param)) throw GraphError("finite_diff_check: node is not a parameter");

  graph.backward(loss);
  const Matrix<T> analytic = graph.grad(param);
  const Matrix<T> original = graph.value(param);

  double worst = 0.0;
  for (std::size_t k = 0; k < original.size(); ++k) {
    Matrix<T> probe = original;
    probe.data()[k] = original.data()[k] + static_cast<T>(eps);
    graph.set_value(param, probe);
    graph.forward();
    const double up = static_cast<double>(graph.value(loss)(0, 0));
    probe.data()[k] = original.data()[k] - static_cast<T>(eps);
    graph.set_value(param, probe);
    graph.forward();
    const double down = static_cast<double>(graph.value(loss)(0, 0));

    const double numeric = (up - down) / (2.0 * eps);
    const double a = static_cast<double>(analytic.data()[k]);
    const double den = std::max({std::abs(a), std::abs(numeric), 1e-12});
    worst = std::max(worst, std::abs(a - numeric) / den);
  }
  graph.set_value(param, original);
  graph.forward();
  graph.backward(loss);
  return worst;
}

}  // namespace krona
