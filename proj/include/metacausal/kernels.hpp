#pragma once

// Data-parallel inner loops. Each kernel has an OpenMP version used by the
// library and a plain serial version kept as the reference for tests and the
// benchmark. Parallel reductions use fixed-size blocks combined in index order,
// so results do not depend on the thread count.

#include <cstdint>
#include <utility>
#include <vector>

#include "metacausal/bayes_core.hpp"

namespace metacausal::kernels {

inline constexpr Eigen::Index kRowBlock = 64;

// Sum of Bernoulli log-likelihood over rows; gradient written to grad (resized).
double loglik_rows(const PredictorSpec& spec, const Vector& phi, const Matrix& x, const Vector& y, Vector& grad);

// BALD information gain for each candidate pair (i, j) given posterior samples
// of the target embedding (S x d) and source embeddings (n x d).
std::vector<double> bald_eig_pool(const std::vector<std::pair<int, int>>& pairs, const Matrix& sources,
                                  const Matrix& samples, double tau);

struct McEstimate {
  double mean = 0.0;
  double std_err = 0.0;
};

// Monte Carlo estimate of KL(q || p) = E_q[log q - log p].
McEstimate mc_kl(const DiagGaussian& q, const DiagGaussian& p, std::int64_t n_samples, std::uint64_t seed);

// 0-1 risk of the sign classifier of each parameter sample (rows of phi).
std::vector<double> zero_one_risks(const PredictorSpec& spec, const Matrix& phi, const Matrix& x, const Vector& y);

namespace serial {
double loglik_rows(const PredictorSpec& spec, const Vector& phi, const Matrix& x, const Vector& y, Vector& grad);
std::vector<double> bald_eig_pool(const std::vector<std::pair<int, int>>& pairs, const Matrix& sources,
                                  const Matrix& samples, double tau);
McEstimate mc_kl(const DiagGaussian& q, const DiagGaussian& p, std::int64_t n_samples, std::uint64_t seed);
std::vector<double> zero_one_risks(const PredictorSpec& spec, const Matrix& phi, const Matrix& x, const Vector& y);
}  // namespace serial

// Shared scalar helpers.
double binary_entropy(double p);
double std_normal_cdf(double x);
double log_std_normal_cdf(double x);
// d/dx log Phi(x) = phi(x) / Phi(x), stable for large negative x.
double inverse_mills(double x);

}  // namespace metacausal::kernels
