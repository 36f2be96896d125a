#include "metacausal/kernels.hpp"

#include <omp.h>

#include <cmath>
#include <numbers>

namespace metacausal::kernels {

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;
constexpr std::int64_t kMcBlock = 4096;

// Per-row contribution shared by both loglik variants.
inline double row_term(const PredictorSpec& spec, const Vector& phi, const double* xrow, double yi, double* grad) {
  const double raw = predictor_logit(spec, phi, xrow);
  const double f = clamp_logit(raw);
  // y log s(f) + (1 - y) log(1 - s(f)) = y f - softplus(f)
  const double value = yi * f + log_sigmoid(-f);
  if (std::abs(raw) < kLogitClamp) predictor_logit_grad(spec, phi, xrow, yi - sigmoid(f), grad);
  return value;
}

Matrix distances(const Matrix& samples, const Matrix& sources) {
  Matrix d(samples.rows(), sources.rows());
  for (Eigen::Index s = 0; s < samples.rows(); ++s)
    for (Eigen::Index k = 0; k < sources.rows(); ++k) d(s, k) = (samples.row(s) - sources.row(k)).norm();
  return d;
}

double pair_eig(const Matrix& dist, int i, int j, double tau) {
  const Eigen::Index s_count = dist.rows();
  double p_bar = 0.0;
  double h_mean = 0.0;
  for (Eigen::Index s = 0; s < s_count; ++s) {
    const double p = std_normal_cdf(tau * (dist(s, j) - dist(s, i)));
    p_bar += p;
    h_mean += binary_entropy(p);
  }
  p_bar /= static_cast<double>(s_count);
  h_mean /= static_cast<double>(s_count);
  return std::max(0.0, binary_entropy(p_bar) - h_mean);
}

struct BlockSums {
  double sum = 0.0;
  double sum_sq = 0.0;
};

BlockSums mc_kl_block(const DiagGaussian& q, const DiagGaussian& p, std::int64_t block, std::int64_t count,
                      std::uint64_t seed) {
  Rng rng(seed, {"mc_kl", static_cast<std::uint64_t>(block)});
  const Vector sq = q.std();
  const Vector sp = p.std();
  const Vector log_ratio = sp.array().log() - sq.array().log();
  const double const_part = log_ratio.sum();
  BlockSums out;
  for (std::int64_t n = 0; n < count; ++n) {
    double v = const_part;
    for (Eigen::Index k = 0; k < q.dim(); ++k) {
      const double e = rng.normal();
      const double x = q.mean[k] + sq[k] * e;
      const double r = (x - p.mean[k]) / sp[k];
      v += 0.5 * (r * r - e * e);
    }
    out.sum += v;
    out.sum_sq += v * v;
  }
  return out;
}

McEstimate finish(double sum, double sum_sq, std::int64_t n) {
  McEstimate e;
  const double dn = static_cast<double>(n);
  e.mean = sum / dn;
  const double var = std::max(0.0, sum_sq / dn - e.mean * e.mean) * dn / std::max(1.0, dn - 1.0);
  e.std_err = std::sqrt(var / dn);
  return e;
}

double risk_of(const PredictorSpec& spec, const Vector& phi, const Matrix& x, const Vector& y) {
  std::int64_t wrong = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double pred = predictor_logit(spec, phi, x.row(i).data()) > 0.0 ? 1.0 : 0.0;
    wrong += pred != y[i];
  }
  return static_cast<double>(wrong) / static_cast<double>(x.rows());
}

}  // namespace

double binary_entropy(double p) {
  if (p <= 0.0 || p >= 1.0) return 0.0;
  return -p * std::log(p) - (1.0 - p) * std::log1p(-p);
}

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double log_std_normal_cdf(double x) {
  if (x > -30.0) return std::log(0.5 * std::erfc(-x / std::numbers::sqrt2));
  // Asymptotic expansion of the Mills ratio.
  const double x2 = x * x;
  const double series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2) + 105.0 / (x2 * x2 * x2 * x2);
  return -0.5 * x2 - std::log(-x) - kLogSqrt2Pi + std::log(series);
}

double inverse_mills(double x) {
  if (x > -30.0) return std::exp(-0.5 * x * x - kLogSqrt2Pi - log_std_normal_cdf(x));
  const double x2 = x * x;
  const double series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2) + 105.0 / (x2 * x2 * x2 * x2);
  return -x / series;
}

double loglik_rows(const PredictorSpec& spec, const Vector& phi, const Matrix& x, const Vector& y, Vector& grad) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index p = phi.size();
  const Eigen::Index blocks = (rows + kRowBlock - 1) / kRowBlock;
  std::vector<double> values(static_cast<std::size_t>(blocks), 0.0);
  Matrix grads = Matrix::Zero(blocks, p);
#pragma omp parallel for schedule(static) if (blocks >= 8)
  for (Eigen::Index b = 0; b < blocks; ++b) {
    const Eigen::Index end = std::min(rows, (b + 1) * kRowBlock);
    double v = 0.0;
    for (Eigen::Index i = b * kRowBlock; i < end; ++i) v += row_term(spec, phi, x.row(i).data(), y[i], grads.row(b).data());
    values[static_cast<std::size_t>(b)] = v;
  }
  grad = Vector::Zero(p);
  double total = 0.0;
  for (Eigen::Index b = 0; b < blocks; ++b) {
    total += values[static_cast<std::size_t>(b)];
    grad += grads.row(b).transpose();
  }
  return total;
}

std::vector<double> bald_eig_pool(const std::vector<std::pair<int, int>>& pairs, const Matrix& sources,
                                  const Matrix& samples, double tau) {
  const Matrix d = distances(samples, sources);
  std::vector<double> eig(pairs.size());
  const auto n = static_cast<std::int64_t>(pairs.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t c = 0; c < n; ++c) {
    const auto [i, j] = pairs[static_cast<std::size_t>(c)];
    eig[static_cast<std::size_t>(c)] = pair_eig(d, i, j, tau);
  }
  return eig;
}

McEstimate mc_kl(const DiagGaussian& q, const DiagGaussian& p, std::int64_t n_samples, std::uint64_t seed) {
  const std::int64_t blocks = (n_samples + kMcBlock - 1) / kMcBlock;
  std::vector<BlockSums> partial(static_cast<std::size_t>(blocks));
#pragma omp parallel for schedule(static)
  for (std::int64_t b = 0; b < blocks; ++b) {
    const std::int64_t count = std::min(kMcBlock, n_samples - b * kMcBlock);
    partial[static_cast<std::size_t>(b)] = mc_kl_block(q, p, b, count, seed);
  }
  double sum = 0.0, sum_sq = 0.0;
  for (const auto& s : partial) {
    sum += s.sum;
    sum_sq += s.sum_sq;
  }
  return finish(sum, sum_sq, n_samples);
}

std::vector<double> zero_one_risks(const PredictorSpec& spec, const Matrix& phi, const Matrix& x, const Vector& y) {
  std::vector<double> out(static_cast<std::size_t>(phi.rows()));
  const auto n = static_cast<std::int64_t>(phi.rows());
#pragma omp parallel for schedule(static)
  for (std::int64_t s = 0; s < n; ++s) out[static_cast<std::size_t>(s)] = risk_of(spec, phi.row(s).transpose(), x, y);
  return out;
}

namespace serial {

double loglik_rows(const PredictorSpec& spec, const Vector& phi, const Matrix& x, const Vector& y, Vector& grad) {
  grad = Vector::Zero(phi.size());
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) total += row_term(spec, phi, x.row(i).data(), y[i], grad.data());
  return total;
}

std::vector<double> bald_eig_pool(const std::vector<std::pair<int, int>>& pairs, const Matrix& sources,
                                  const Matrix& samples, double tau) {
  std::vector<double> eig;
  eig.reserve(pairs.size());
  for (const auto& [i, j] : pairs) {
    double p_bar = 0.0, h_mean = 0.0;
    for (Eigen::Index s = 0; s < samples.rows(); ++s) {
      const double delta = (samples.row(s) - sources.row(j)).norm() - (samples.row(s) - sources.row(i)).norm();
      const double p = std_normal_cdf(tau * delta);
      p_bar += p;
      h_mean += binary_entropy(p);
    }
    p_bar /= static_cast<double>(samples.rows());
    h_mean /= static_cast<double>(samples.rows());
    eig.push_back(std::max(0.0, binary_entropy(p_bar) - h_mean));
  }
  return eig;
}

McEstimate mc_kl(const DiagGaussian& q, const DiagGaussian& p, std::int64_t n_samples, std::uint64_t seed) {
  double sum = 0.0, sum_sq = 0.0;
  for (std::int64_t b = 0; b * kMcBlock < n_samples; ++b) {
    const auto s = mc_kl_block(q, p, b, std::min(kMcBlock, n_samples - b * kMcBlock), seed);
    sum += s.sum;
    sum_sq += s.sum_sq;
  }
  return finish(sum, sum_sq, n_samples);
}

std::vector<double> zero_one_risks(const PredictorSpec& spec, const Matrix& phi, const Matrix& x, const Vector& y) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(phi.rows()));
  for (Eigen::Index s = 0; s < phi.rows(); ++s) out.push_back(risk_of(spec, phi.row(s).transpose(), x, y));
  return out;
}

}  // namespace serial

}  // namespace metacausal::kernels
