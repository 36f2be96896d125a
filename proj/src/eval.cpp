#include "metacausal/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "metacausal/embedding.hpp"
#include "metacausal/kernels.hpp"
#include "metacausal/metalearn.hpp"

namespace metacausal {

double auroc(const Vector& scores, const Vector& labels) {
  if (scores.size() != labels.size()) throw DomainError("scores and labels differ in length");
  require_binary(labels);
  const Eigen::Index n = scores.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  double n_pos = 0.0;
  for (Eigen::Index i = 0; i < n;) {
    Eigen::Index j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (Eigen::Index k = i; k <= j; ++k) {
      if (labels[order[k]] == 1.0) {
        rank_sum_pos += midrank;
        n_pos += 1.0;
      }
    }
    i = j + 1;
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

double log_loss(const Vector& scores, const Vector& labels) {
  if (scores.size() != labels.size()) throw DomainError("scores and labels differ in length");
  if (scores.size() == 0) throw DomainError("log loss of an empty set");
  require_binary(labels);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    const double p = std::clamp(scores[i], kProbClamp, 1.0 - kProbClamp);
    sum -= labels[i] == 1.0 ? std::log(p) : std::log1p(-p);
  }
  return sum / static_cast<double>(scores.size());
}

double negative_transfer(const Vector& scores_x, const Vector& scores_nt, const Vector& labels) {
  if (scores_x.size() != scores_nt.size()) throw DomainError("score vectors differ in length");
  return log_loss(scores_x, labels) - log_loss(scores_nt, labels);
}

RiskEstimate prior_induced_risk(const PredictorSpec& spec, const DiagGaussian& prior, const Matrix& x,
                                const Vector& y, const Matrix& noise) {
  if (noise.rows() < 2) throw DomainError("risk estimate needs at least two parameter samples");
  const Samples draws = sample_with_noise(prior, noise);
  const std::vector<double> risks = kernels::zero_one_risks(spec, draws.phi, x, y);
  RiskEstimate r;
  r.n_param_samples = static_cast<int>(risks.size());
  r.n_data = static_cast<int>(x.rows());
  double sum = 0.0, sq = 0.0;
  for (double v : risks) sum += v;
  r.value = sum / static_cast<double>(risks.size());
  for (double v : risks) sq += (v - r.value) * (v - r.value);
  const double n = static_cast<double>(risks.size());
  r.std_err = std::sqrt(sq / (n - 1.0) / n);
  return r;
}

RiskEstimate prior_induced_risk(const PredictorSpec& spec, const DiagGaussian& prior, const Matrix& x,
                                const Vector& y, int n_param_samples, Rng& rng) {
  return prior_induced_risk(spec, prior, x, y, standard_normal_matrix(rng, n_param_samples, prior.dim()));
}

double lipschitz_constant(const Matrix& w_emb, double sigma, double loss_bound) {
  if (!(sigma > 0.0)) throw DomainError("sigma must be positive");
  return loss_bound * spectral_norm(w_emb) / (2.0 * sigma);
}

LipschitzCheck check_lipschitz(const PredictorSpec& spec, const Vector& theta, const Matrix& w_emb, double sigma,
                               const Vector& z1, const Vector& z2, const Matrix& x, const Vector& y,
                               int n_param_samples, Rng& rng) {
  if (z1.size() != z2.size() || z1.size() != w_emb.cols()) throw DomainError("embedding dimension mismatch");
  // Independent draws on each side: the tolerance below assumes it.
  const RiskEstimate r1 =
      prior_induced_risk(spec, DiagGaussian::isotropic(theta + w_emb * z1, sigma), x, y, n_param_samples, rng);
  const RiskEstimate r2 =
      prior_induced_risk(spec, DiagGaussian::isotropic(theta + w_emb * z2, sigma), x, y, n_param_samples, rng);
  LipschitzCheck c;
  c.lhs = std::abs(r1.value - r2.value);
  c.rhs = lipschitz_constant(w_emb, sigma) * (z1 - z2).norm();
  c.tolerance = 3.0 * std::hypot(r1.std_err, r2.std_err);
  c.holds = c.lhs <= c.rhs + c.tolerance;
  return c;
}

EpsDecomposition eps_decomposition(const Vector& z_true, const Vector& z_tilde, const Vector& z_hat,
                                   const Vector& z_bar, const Matrix& w_emb, double sigma) {
  const auto d = z_true.size();
  if (z_tilde.size() != d || z_hat.size() != d || z_bar.size() != d) throw DomainError("embedding dimension mismatch");
  EpsDecomposition e;
  e.eps_ood = dist(z_true, z_bar);
  e.eps_causal = dist(z_tilde, z_true);
  e.eps_expert = dist(z_hat, z_tilde);
  e.lipschitz_const = lipschitz_constant(w_emb, sigma);
  e.bound = e.lipschitz_const * e.total();
  return e;
}

NtMitigationReport check_nt_mitigation(const std::vector<NtRun>& runs, int n_bootstrap, double confidence,
                                       std::uint64_t seed) {
  if (n_bootstrap < 1 || !(confidence > 0.0 && confidence < 1.0)) throw ConfigError("invalid bootstrap settings");
  NtMitigationReport rep;
  rep.n_runs = static_cast<int>(runs.size());
  std::vector<double> diff, causal, global;
  for (const NtRun& r : runs) {
    if (r.eps_expert + r.eps_causal <= r.eps_ood) {
      diff.push_back(r.nt_causal - r.nt_global);
      causal.push_back(r.nt_causal);
      global.push_back(r.nt_global);
    }
  }
  rep.n_condition_met = static_cast<int>(diff.size());
  if (diff.empty()) {
    rep.message = "condition never met";
    rep.ci_low = rep.ci_high = std::numeric_limits<double>::quiet_NaN();
    return rep;
  }
  rep.condition_met = true;
  const auto mean = [](const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  rep.mean_nt_causal = mean(causal);
  rep.mean_nt_global = mean(global);
  rep.mean_difference = mean(diff);

  Rng rng(seed, {"bootstrap"});
  std::vector<double> boot(static_cast<std::size_t>(n_bootstrap));
  for (auto& b : boot) {
    double s = 0.0;
    for (std::size_t k = 0; k < diff.size(); ++k) s += diff[rng.below(diff.size())];
    b = s / static_cast<double>(diff.size());
  }
  std::sort(boot.begin(), boot.end());
  const double alpha = 0.5 * (1.0 - confidence);
  const auto at = [&](double q) {
    const double pos = q * static_cast<double>(boot.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, boot.size() - 1);
    return boot[lo] + (pos - static_cast<double>(lo)) * (boot[hi] - boot[lo]);
  };
  rep.ci_low = at(alpha);
  rep.ci_high = at(1.0 - alpha);
  // Violation: the data rule out NT_causal <= NT_global.
  rep.violation = rep.ci_low > 0.0;
  char buf[200];
  std::snprintf(buf, sizeof buf, "%d/%d runs meet the condition; mean diff %.4g, CI [%.4g, %.4g]",
                rep.n_condition_met, rep.n_runs, rep.mean_difference, rep.ci_low, rep.ci_high);
  rep.message = buf;
  return rep;
}

}  // namespace metacausal
