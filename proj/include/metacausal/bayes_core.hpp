#pragma once

#include <cstdint>

#include "metacausal/json_io.hpp"
#include "metacausal/rng.hpp"
#include "metacausal/types.hpp"

namespace metacausal {

inline constexpr double kMinLogStd = -10.0;
inline constexpr double kMaxLogStd = 3.0;
inline constexpr double kLogitClamp = 50.0;

// Diagonal Gaussian, parameterised by mean and log standard deviation.
struct DiagGaussian {
  Vector mean;
  Vector log_std;

  static DiagGaussian isotropic(const Vector& mean, double sd);
  static DiagGaussian standard(Eigen::Index dim);

  Eigen::Index dim() const { return mean.size(); }
  // exp(log_std) with log_std clamped to [kMinLogStd, kMaxLogStd]; each clamped
  // coordinate bumps the global clamp counter.
  Vector std() const;
  void validate() const;
};

// Number of times a log_std coordinate hit the clamp since the last reset.
std::uint64_t log_std_clamp_events();
void reset_log_std_clamp_events();

json gaussian_to_json(const DiagGaussian& g);
DiagGaussian gaussian_from_json(const json& j);

struct PredictorSpec {
  enum class Arch { linear, mlp };
  Arch arch = Arch::linear;
  int input_dim = 10;
  int hidden = 0;

  static PredictorSpec linear(int input_dim) { return {Arch::linear, input_dim, 0}; }
  static PredictorSpec mlp(int input_dim, int hidden) { return {Arch::mlp, input_dim, hidden}; }

  // linear: input_dim weights + bias. mlp: W1 (hidden x input, row-major), b1,
  // w2, b2 with tanh hidden units.
  int param_dim() const;
  void validate() const;
};

json predictor_to_json(const PredictorSpec& spec);
PredictorSpec predictor_from_json(const json& j);

// Raw (unclamped) logit of one input row.
double predictor_logit(const PredictorSpec& spec, const Vector& phi, const double* x);
// Accumulates scale * d logit / d phi into grad.
void predictor_logit_grad(const PredictorSpec& spec, const Vector& phi, const double* x, double scale,
                          double* grad);

double clamp_logit(double f);
double log_sigmoid(double f);
double sigmoid(double f);

struct LogLik {
  double value = 0.0;
  Vector grad;
};

// Bernoulli log-likelihood sum_i [y_i log s(f_i) + (1-y_i) log(1-s(f_i))] and
// its gradient with respect to phi. Throws DomainError on non-binary labels.
LogLik loglik(const PredictorSpec& spec, const Vector& phi, const Matrix& x, const Vector& y);
void require_binary(const Vector& y);

double kl_diag(const DiagGaussian& q, const DiagGaussian& p);

struct KlGrad {
  Vector q_mean, q_log_std, p_mean, p_log_std;
};
KlGrad kl_diag_grad(const DiagGaussian& q, const DiagGaussian& p);

struct Samples {
  Matrix phi;    // S x p
  Matrix noise;  // S x p standard normal draws behind phi
};

Samples sample(const DiagGaussian& q, Rng& rng, int count);
// Reparameterise fixed noise through q.
Samples sample_with_noise(const DiagGaussian& q, const Matrix& noise);
Matrix standard_normal_matrix(Rng& rng, int rows, Eigen::Index cols);

struct ElboEstimate {
  double value = 0.0;
  Vector grad_mean;
  Vector grad_log_std;
  int mc_samples = 0;
};

// value = -(1/M) mean_s loglik(phi_s) + kl_weight * KL(q || prior), with
// pathwise gradients for the likelihood and closed-form KL gradients.
ElboEstimate elbo_grad(const DiagGaussian& q, const DiagGaussian& prior, const Matrix& x, const Vector& y,
                       const PredictorSpec& spec, const Matrix& noise, double kl_weight);
ElboEstimate elbo_grad(const DiagGaussian& q, const DiagGaussian& prior, const Matrix& x, const Vector& y,
                       const PredictorSpec& spec, int mc_samples, double kl_weight, Rng& rng);

// Posterior predictive P(y=1 | x) averaged over parameter samples.
Vector predictive_scores(const PredictorSpec& spec, const Matrix& phi_samples, const Matrix& x);
Vector predictive_scores(const PredictorSpec& spec, const DiagGaussian& q, const Matrix& x, int mc_samples,
                         Rng& rng);

// Adam on a flat parameter vector.
class Adam {
 public:
  Adam() : Adam(1e-3) {}
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(Eigen::Ref<Vector> params, const Vector& grad);
  void reset() { t_ = 0; m_.resize(0); v_.resize(0); }
  double lr() const { return lr_; }
  int steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  Vector m_, v_;
  int t_ = 0;
};

}  // namespace metacausal
