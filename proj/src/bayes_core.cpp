#include "metacausal/bayes_core.hpp"

#include <atomic>
#include <cmath>

#include "metacausal/kernels.hpp"

namespace metacausal {

namespace {

std::atomic<std::uint64_t> g_clamp_events{0};

inline bool log_std_in_range(double s) { return s > kMinLogStd && s < kMaxLogStd; }

// 1 where d std / d log_std is live, 0 where the clamp is active.
Vector clamp_mask(const Vector& log_std) {
  return log_std.unaryExpr([](double s) { return log_std_in_range(s) ? 1.0 : 0.0; });
}

}  // namespace

DiagGaussian DiagGaussian::isotropic(const Vector& mean, double sd) {
  if (!(sd > 0.0)) throw DomainError("standard deviation must be positive");
  return {mean, Vector::Constant(mean.size(), std::log(sd))};
}

DiagGaussian DiagGaussian::standard(Eigen::Index dim) { return {Vector::Zero(dim), Vector::Zero(dim)}; }

Vector DiagGaussian::std() const {
  Vector out(log_std.size());
  for (Eigen::Index k = 0; k < log_std.size(); ++k) {
    double s = log_std[k];
    if (s < kMinLogStd || s > kMaxLogStd) {
      g_clamp_events.fetch_add(1, std::memory_order_relaxed);
      s = std::clamp(s, kMinLogStd, kMaxLogStd);
    }
    out[k] = std::exp(s);
  }
  return out;
}

void DiagGaussian::validate() const {
  if (mean.size() < 1) throw DomainError("Gaussian dimension must be at least 1");
  if (mean.size() != log_std.size()) throw DomainError("mean and log_std differ in length");
  if (!mean.allFinite() || !log_std.allFinite()) throw NumericalError("non-finite Gaussian parameters");
}

std::uint64_t log_std_clamp_events() { return g_clamp_events.load(); }
void reset_log_std_clamp_events() { g_clamp_events.store(0); }

json gaussian_to_json(const DiagGaussian& g) {
  return {{"mean", vector_to_json(g.mean)}, {"log_std", vector_to_json(g.log_std)}};
}

DiagGaussian gaussian_from_json(const json& j) {
  DiagGaussian g{vector_from_json(j.at("mean")), vector_from_json(j.at("log_std"))};
  g.validate();
  return g;
}

int PredictorSpec::param_dim() const {
  if (arch == Arch::linear) return input_dim + 1;
  return hidden * (input_dim + 1) + hidden + 1;
}

void PredictorSpec::validate() const {
  if (input_dim < 1) throw ConfigError("predictor input_dim must be positive");
  if (arch == Arch::mlp && hidden < 1) throw ConfigError("mlp predictor needs hidden >= 1");
  if (arch == Arch::linear && hidden != 0) throw ConfigError("linear predictor has no hidden layer");
}

json predictor_to_json(const PredictorSpec& spec) {
  return {{"arch", spec.arch == PredictorSpec::Arch::linear ? "linear" : "mlp"},
          {"input_dim", spec.input_dim},
          {"hidden", spec.hidden},
          {"param_dim", spec.param_dim()}};
}

PredictorSpec predictor_from_json(const json& j) {
  const auto arch = j.at("arch").get<std::string>();
  PredictorSpec spec;
  if (arch == "linear") {
    spec = PredictorSpec::linear(j.at("input_dim").get<int>());
  } else if (arch == "mlp") {
    spec = PredictorSpec::mlp(j.at("input_dim").get<int>(), j.at("hidden").get<int>());
  } else {
    throw ConfigError("unknown predictor arch '" + arch + "'");
  }
  spec.validate();
  return spec;
}

double predictor_logit(const PredictorSpec& spec, const Vector& phi, const double* x) {
  const int in = spec.input_dim;
  if (spec.arch == PredictorSpec::Arch::linear) {
    double f = phi[in];
    for (int j = 0; j < in; ++j) f += phi[j] * x[j];
    return f;
  }
  const int h = spec.hidden;
  const double* w1 = phi.data();
  const double* b1 = w1 + h * in;
  const double* w2 = b1 + h;
  double f = w2[h];
  for (int k = 0; k < h; ++k) {
    double a = b1[k];
    for (int j = 0; j < in; ++j) a += w1[k * in + j] * x[j];
    f += w2[k] * std::tanh(a);
  }
  return f;
}

void predictor_logit_grad(const PredictorSpec& spec, const Vector& phi, const double* x, double scale,
                          double* grad) {
  const int in = spec.input_dim;
  if (spec.arch == PredictorSpec::Arch::linear) {
    for (int j = 0; j < in; ++j) grad[j] += scale * x[j];
    grad[in] += scale;
    return;
  }
  const int h = spec.hidden;
  const double* w1 = phi.data();
  const double* b1 = w1 + h * in;
  const double* w2 = b1 + h;
  double* g_w1 = grad;
  double* g_b1 = g_w1 + h * in;
  double* g_w2 = g_b1 + h;
  for (int k = 0; k < h; ++k) {
    double a = b1[k];
    for (int j = 0; j < in; ++j) a += w1[k * in + j] * x[j];
    const double t = std::tanh(a);
    const double back = scale * w2[k] * (1.0 - t * t);
    for (int j = 0; j < in; ++j) g_w1[k * in + j] += back * x[j];
    g_b1[k] += back;
    g_w2[k] += scale * t;
  }
  g_w2[h] += scale;
}

double clamp_logit(double f) { return std::clamp(f, -kLogitClamp, kLogitClamp); }

double log_sigmoid(double f) {
  // -softplus(-f)
  return -(std::max(-f, 0.0) + std::log1p(std::exp(-std::abs(f))));
}

double sigmoid(double f) {
  if (f >= 0) return 1.0 / (1.0 + std::exp(-f));
  const double e = std::exp(f);
  return e / (1.0 + e);
}

void require_binary(const Vector& y) {
  for (Eigen::Index i = 0; i < y.size(); ++i)
    if (y[i] != 0.0 && y[i] != 1.0) throw DomainError("labels must be 0 or 1");
}

LogLik loglik(const PredictorSpec& spec, const Vector& phi, const Matrix& x, const Vector& y) {
  if (phi.size() != spec.param_dim()) throw DomainError("parameter vector does not match the predictor");
  if (x.cols() != spec.input_dim || x.rows() != y.size()) throw DomainError("data shapes do not match");
  require_binary(y);
  LogLik out;
  out.value = kernels::loglik_rows(spec, phi, x, y, out.grad);
  return out;
}

double kl_diag(const DiagGaussian& q, const DiagGaussian& p) {
  if (q.dim() != p.dim()) throw DomainError("KL between Gaussians of different dimension");
  const Vector sq = q.std();
  const Vector sp = p.std();
  double kl = 0.0;
  for (Eigen::Index k = 0; k < q.dim(); ++k) {
    const double r = sq[k] / sp[k];
    const double m = (q.mean[k] - p.mean[k]) / sp[k];
    kl += -std::log(r) + 0.5 * (r * r + m * m) - 0.5;
  }
  return kl;
}

KlGrad kl_diag_grad(const DiagGaussian& q, const DiagGaussian& p) {
  if (q.dim() != p.dim()) throw DomainError("KL between Gaussians of different dimension");
  const Vector sq = q.std();
  const Vector sp = p.std();
  const Vector var_p = sp.array().square();
  const Vector diff = q.mean - p.mean;
  KlGrad g;
  g.q_mean = diff.cwiseQuotient(var_p);
  g.p_mean = -g.q_mean;
  g.q_log_std = ((sq.array().square() / var_p.array()) - 1.0).matrix().cwiseProduct(clamp_mask(q.log_std));
  g.p_log_std = (1.0 - (sq.array().square() + diff.array().square()) / var_p.array())
                    .matrix()
                    .cwiseProduct(clamp_mask(p.log_std));
  return g;
}

Matrix standard_normal_matrix(Rng& rng, int rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (int s = 0; s < rows; ++s)
    for (Eigen::Index k = 0; k < cols; ++k) m(s, k) = rng.normal();
  return m;
}

Samples sample_with_noise(const DiagGaussian& q, const Matrix& noise) {
  if (noise.cols() != q.dim()) throw DomainError("noise width does not match the Gaussian");
  const Vector sd = q.std();
  Samples out;
  out.noise = noise;
  out.phi = (noise.array().rowwise() * sd.transpose().array()).matrix();
  out.phi.rowwise() += q.mean.transpose();
  return out;
}

Samples sample(const DiagGaussian& q, Rng& rng, int count) {
  if (count < 1) throw DomainError("sample count must be at least 1");
  return sample_with_noise(q, standard_normal_matrix(rng, count, q.dim()));
}

ElboEstimate elbo_grad(const DiagGaussian& q, const DiagGaussian& prior, const Matrix& x, const Vector& y,
                       const PredictorSpec& spec, const Matrix& noise, double kl_weight) {
  if (noise.rows() < 1) throw DomainError("at least one Monte Carlo sample is required");
  if (!(kl_weight >= 0.0)) throw DomainError("kl_weight must be non-negative");
  if (x.rows() < 1) throw DomainError("empty dataset");
  const Samples draws = sample_with_noise(q, noise);
  const Vector sd = q.std();
  const Vector live = clamp_mask(q.log_std);
  const double scale = 1.0 / (static_cast<double>(x.rows()) * static_cast<double>(noise.rows()));

  ElboEstimate est;
  est.mc_samples = static_cast<int>(noise.rows());
  est.grad_mean = Vector::Zero(q.dim());
  est.grad_log_std = Vector::Zero(q.dim());
  double ll = 0.0;
  for (Eigen::Index s = 0; s < noise.rows(); ++s) {
    const LogLik l = loglik(spec, draws.phi.row(s).transpose(), x, y);
    ll += l.value;
    est.grad_mean -= scale * l.grad;
    est.grad_log_std -= scale * l.grad.cwiseProduct(noise.row(s).transpose()).cwiseProduct(sd);
  }
  est.grad_log_std = est.grad_log_std.cwiseProduct(live);
  est.value = -scale * ll;
  if (kl_weight > 0.0) {
    const KlGrad kg = kl_diag_grad(q, prior);
    est.value += kl_weight * kl_diag(q, prior);
    est.grad_mean += kl_weight * kg.q_mean;
    est.grad_log_std += kl_weight * kg.q_log_std;
  }
  return est;
}

ElboEstimate elbo_grad(const DiagGaussian& q, const DiagGaussian& prior, const Matrix& x, const Vector& y,
                       const PredictorSpec& spec, int mc_samples, double kl_weight, Rng& rng) {
  if (mc_samples < 1) throw DomainError("at least one Monte Carlo sample is required");
  return elbo_grad(q, prior, x, y, spec, standard_normal_matrix(rng, mc_samples, q.dim()), kl_weight);
}

Vector predictive_scores(const PredictorSpec& spec, const Matrix& phi_samples, const Matrix& x) {
  Vector scores = Vector::Zero(x.rows());
  for (Eigen::Index s = 0; s < phi_samples.rows(); ++s) {
    const Vector phi = phi_samples.row(s).transpose();
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      scores[i] += sigmoid(clamp_logit(predictor_logit(spec, phi, x.row(i).data())));
  }
  return scores / static_cast<double>(phi_samples.rows());
}

Vector predictive_scores(const PredictorSpec& spec, const DiagGaussian& q, const Matrix& x, int mc_samples,
                         Rng& rng) {
  return predictive_scores(spec, sample(q, rng, mc_samples).phi, x);
}

void Adam::step(Eigen::Ref<Vector> params, const Vector& grad) {
  if (m_.size() != params.size()) {
    m_ = Vector::Zero(params.size());
    v_ = Vector::Zero(params.size());
    t_ = 0;
  }
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1_, t_);
  const double c2 = 1.0 - std::pow(beta2_, t_);
  params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

}  // namespace metacausal
