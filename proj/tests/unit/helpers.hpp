#pragma once

#include <cmath>
#include <functional>

#include "metacausal/types.hpp"

namespace testing_util {

// Central differences of f at x, one coordinate at a time.
inline metacausal::Vector central_diff(const std::function<double(const metacausal::Vector&)>& f,
                                       const metacausal::Vector& x, double h) {
  metacausal::Vector g(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    metacausal::Vector a = x, b = x;
    a(k) += h;
    b(k) -= h;
    g(k) = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

inline double rel_err(const metacausal::Vector& a, const metacausal::Vector& b) {
  return (a - b).norm() / std::max(1e-12, std::max(a.norm(), b.norm()));
}

inline double pearson(const metacausal::Vector& a, const metacausal::Vector& b) {
  const metacausal::Vector ca = a.array() - a.mean();
  const metacausal::Vector cb = b.array() - b.mean();
  return ca.dot(cb) / std::sqrt(ca.squaredNorm() * cb.squaredNorm());
}

}  // namespace testing_util
