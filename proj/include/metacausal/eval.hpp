#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metacausal/bayes_core.hpp"
#include "metacausal/taskgen.hpp"

namespace metacausal {

// Mann-Whitney AUROC with midranks for ties. NaN when only one class is present.
double auroc(const Vector& scores, const Vector& labels);

inline constexpr double kProbClamp = 1e-12;

// Mean binary cross-entropy with probabilities clamped to [1e-12, 1 - 1e-12].
double log_loss(const Vector& scores, const Vector& labels);

// mean logloss(X) - mean logloss(NT); positive means transfer hurt.
double negative_transfer(const Vector& scores_x, const Vector& scores_nt, const Vector& labels);

struct RiskEstimate {
  double value = 0.0;
  int n_param_samples = 0;
  int n_data = 0;
  double std_err = 0.0;
};

// E_{phi ~ prior}[0-1 risk of phi on (x, y)] by Monte Carlo (loss bound M = 1).
RiskEstimate prior_induced_risk(const PredictorSpec& spec, const DiagGaussian& prior, const Matrix& x,
                                const Vector& y, int n_param_samples, Rng& rng);
// Same, with caller-supplied standard normal noise (n x p); used to pair the
// two sides of a Lipschitz check with common random numbers.
RiskEstimate prior_induced_risk(const PredictorSpec& spec, const DiagGaussian& prior, const Matrix& x,
                                const Vector& y, const Matrix& noise);

struct LipschitzCheck {
  double lhs = 0.0;
  double rhs = 0.0;
  double tolerance = 0.0;  // 3 x combined standard error
  bool holds = false;
};

// |Rbar(z1) - Rbar(z2)| against M ||W||_2 ||z1 - z2|| / (2 sigma) for the
// priors N(theta + W z, sigma^2 I).
LipschitzCheck check_lipschitz(const PredictorSpec& spec, const Vector& theta, const Matrix& w_emb, double sigma,
                               const Vector& z1, const Vector& z2, const Matrix& x, const Vector& y,
                               int n_param_samples, Rng& rng);

double lipschitz_constant(const Matrix& w_emb, double sigma, double loss_bound = 1.0);

struct EpsDecomposition {
  double eps_ood = 0.0;
  double eps_causal = 0.0;
  double eps_expert = 0.0;
  double lipschitz_const = 0.0;
  double bound = 0.0;

  double total() const { return eps_ood + eps_causal + eps_expert; }
};

EpsDecomposition eps_decomposition(const Vector& z_true, const Vector& z_tilde, const Vector& z_hat,
                                   const Vector& z_bar, const Matrix& w_emb, double sigma);

struct NtRun {
  std::uint64_t seed = 0;
  double shift_s = 0.0;
  double nt_causal = 0.0;
  double nt_global = 0.0;
  double eps_ood = 0.0;
  double eps_causal = 0.0;
  double eps_expert = 0.0;
};

struct NtMitigationReport {
  int n_runs = 0;
  int n_condition_met = 0;
  double mean_nt_causal = 0.0;
  double mean_nt_global = 0.0;
  double mean_difference = 0.0;  // causal - global
  double ci_low = 0.0;
  double ci_high = 0.0;
  bool condition_met = false;
  bool violation = false;
  std::string message;
};

// Restricts to runs with eps_expert + eps_causal <= eps_ood, then bootstraps the
// paired difference NT_causal - NT_global.
NtMitigationReport check_nt_mitigation(const std::vector<NtRun>& runs, int n_bootstrap = 2000,
                                       double confidence = 0.95, std::uint64_t seed = 0);

}  // namespace metacausal
