#pragma once

#include <algorithm>
#include <cstdint>
#include <tuple>
#include <vector>

#include "krona/errors.hpp"
#include "krona/kron.hpp"

namespace krona {

struct FactorShape {
  std::size_t a1 = 1, a2 = 1;  // A_k
  std::size_t b1 = 1, b2 = 1;  // B_k

  std::size_t d_in() const noexcept { return a1 * b1; }
  std::size_t d_out() const noexcept { return a2 * b2; }
  std::size_t parameter_count() const noexcept { return a1 * a2 + b1 * b2; }
  MultCount mults() const { return count_mults(a1, a2, b1, b2); }

  friend bool operator==(const FactorShape&, const FactorShape&) = default;
};

// Ascending divisors of n by trial division up to sqrt(n).
inline std::vector<std::size_t> divisors(std::size_t n) {
  if (n == 0) throw SpecError("divisors: n must be positive");
  std::vector<std::size_t> lo, hi;
  for (std::size_t d = 1; d * d <= n; ++d) {
    if (n % d) continue;
    lo.push_back(d);
    if (d != n / d) hi.push_back(n / d);
  }
  lo.insert(lo.end(), hi.rbegin(), hi.rend());
  return lo;
}

// Every (A_k, B_k) shape with a1*b1 = d_in and a2*b2 = d_out, ordered by
// parameter count, then a1, then a2.
inline std::vector<FactorShape> enumerate_factor_shapes(std::size_t d_in, std::size_t d_out) {
  if (d_in == 0 || d_out == 0) throw SpecError("enumerate_factor_shapes: dims must be >= 1");
  std::vector<FactorShape> out;
  for (std::size_t a1 : divisors(d_in))
    for (std::size_t a2 : divisors(d_out)) out.push_back({a1, a2, d_in / a1, d_out / a2});
  std::sort(out.begin(), out.end(), [](const FactorShape& l, const FactorShape& r) {
    return std::tuple(l.parameter_count(), l.a1, l.a2) <
           std::tuple(r.parameter_count(), r.a1, r.a2);
  });
  return out;
}

}  // namespace krona
