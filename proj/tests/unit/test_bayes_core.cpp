#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "metacausal/bayes_core.hpp"
#include "metacausal/kernels.hpp"
#include "metacausal/metalearn.hpp"

using namespace metacausal;
using testing_util::central_diff;
using testing_util::rel_err;

namespace {

DiagGaussian random_gaussian(Rng& rng, int p, double sd_lo = -1.0, double sd_hi = 0.5) {
  DiagGaussian g{Vector(p), Vector(p)};
  for (int k = 0; k < p; ++k) {
    g.mean(k) = rng.normal();
    g.log_std(k) = rng.uniform(sd_lo, sd_hi);
  }
  return g;
}

struct Problem {
  PredictorSpec spec;
  Matrix x;
  Vector y;
};

Problem random_problem(Rng& rng, int input_dim, int rows) {
  Problem pr{PredictorSpec::linear(input_dim), Matrix(rows, input_dim), Vector(rows)};
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < input_dim; ++j) pr.x(i, j) = rng.normal();
    pr.y(i) = rng.uniform() < 0.4 ? 1.0 : 0.0;
  }
  return pr;
}

}  // namespace

TEST_CASE("kl closed form") {
  Rng rng(1, {"kl"});
  const DiagGaussian q = random_gaussian(rng, 6);
  CHECK(kl_diag(q, q) == 0.0);
  Vector m = Vector::Zero(11);
  m(0) = 1.0;
  const double kl = kl_diag(DiagGaussian::isotropic(Vector::Zero(11), 0.05), DiagGaussian::isotropic(m, 0.05));
  CHECK(kl == doctest::Approx(200.0).epsilon(1e-12));
  CHECK_THROWS(kl_diag(q, random_gaussian(rng, 5)));
}

TEST_CASE("kl is non-negative and zero only at equality") {
  Rng rng(2, {"kl_pos"});
  for (int k = 0; k < 1000; ++k) {
    const DiagGaussian q = random_gaussian(rng, 4), p = random_gaussian(rng, 4);
    CHECK(kl_diag(q, p) > 0.0);
    CHECK(std::abs(kl_diag(p, p)) <= 1e-12);
  }
}

TEST_CASE("kl matches monte carlo within 2 percent") {
  Rng rng(3, {"kl_mc"});
  for (int c = 0; c < 5; ++c) {
    const DiagGaussian q = random_gaussian(rng, 5), p = random_gaussian(rng, 5);
    const double exact = kl_diag(q, p);
    const auto mc = kernels::mc_kl(q, p, 1000000, 100 + static_cast<std::uint64_t>(c));
    CHECK(std::abs(mc.mean - exact) / exact < 0.02);
  }
}

TEST_CASE("kl gradient against finite differences") {
  Rng rng(4, {"kl_grad"});
  const DiagGaussian q = random_gaussian(rng, 5), p = random_gaussian(rng, 5);
  const KlGrad g = kl_diag_grad(q, p);
  auto fqm = [&](const Vector& v) { return kl_diag({v, q.log_std}, p); };
  auto fqs = [&](const Vector& v) { return kl_diag({q.mean, v}, p); };
  auto fpm = [&](const Vector& v) { return kl_diag(q, {v, p.log_std}); };
  auto fps = [&](const Vector& v) { return kl_diag(q, {p.mean, v}); };
  CHECK(rel_err(g.q_mean, central_diff(fqm, q.mean, 1e-5)) < 1e-6);
  CHECK(rel_err(g.q_log_std, central_diff(fqs, q.log_std, 1e-5)) < 1e-6);
  CHECK(rel_err(g.p_mean, central_diff(fpm, p.mean, 1e-5)) < 1e-6);
  CHECK(rel_err(g.p_log_std, central_diff(fps, p.log_std, 1e-5)) < 1e-6);
}

TEST_CASE("sampling") {
  Rng rng(5, {"sample"});
  DiagGaussian tight{Vector::Constant(3, 1.5), Vector::Constant(3, -1e6)};
  const Samples s = sample(tight, rng, 10);
  CHECK((s.phi.rowwise() - tight.mean.transpose()).cwiseAbs().maxCoeff() < 1e-3);

  const DiagGaussian q = random_gaussian(rng, 4);
  const int n = 100000;
  const Samples big = sample(q, rng, n);
  const Vector mean = big.phi.colwise().mean().transpose();
  for (int k = 0; k < 4; ++k) CHECK(std::abs(mean(k) - q.mean(k)) < 4.0 * std::exp(q.log_std(k)) / std::sqrt(n));
  // Recorded noise reproduces the draws.
  CHECK((sample_with_noise(q, big.noise).phi - big.phi).cwiseAbs().maxCoeff() == 0.0);

  Rng a(9, {"same"}), b(9, {"same"});
  CHECK(sample(q, a, 7).phi == sample(q, b, 7).phi);
  CHECK_THROWS(sample(q, a, 0));
}

TEST_CASE("log std clamp counter") {
  reset_log_std_clamp_events();
  DiagGaussian g{Vector::Zero(2), Vector::Constant(2, -20.0)};
  const Vector sd = g.std();
  CHECK(sd(0) == doctest::Approx(std::exp(kMinLogStd)));
  CHECK(log_std_clamp_events() == 2);
  reset_log_std_clamp_events();
  CHECK(log_std_clamp_events() == 0);
}

TEST_CASE("log std clamp stays idle in a nominal adaptation") {
  const GeneratorSpec spec = make_generator_spec(GeneratorConfig{}, 3);
  const World w = generate_experiment_world(spec);
  HyperParams h;
  h.inner_lr = 0.5;
  h.inner_temp = 1.0;
  h.prior_sd = 0.15;
  h.inner_steps = 10;
  const MetaState st = init_meta_state(PredictorSpec::linear(10), h, 4, 3);
  reset_log_std_clamp_events();
  Rng rng(3, {"adapt"});
  (void)inner_adapt(st, w.targets[2].embedding_true, w.targets[2].x, w.targets[2].y, rng);
  CHECK(log_std_clamp_events() == 0);
}

TEST_CASE("loglik values") {
  Rng rng(6, {"loglik"});
  const Problem pr = random_problem(rng, 10, 37);
  const LogLik ll = loglik(pr.spec, Vector::Zero(11), pr.x, pr.y);
  CHECK(ll.value == doctest::Approx(-37.0 * std::log(2.0)).epsilon(1e-12));

  // Saturation: a huge logit on a positive label gives a log-likelihood just below 0.
  Matrix x1(1, 1);
  x1(0, 0) = 1.0;
  Vector y1(1);
  y1(0) = 1.0;
  Vector phi(2);
  phi << 1e6, 0.0;
  const double v = loglik(PredictorSpec::linear(1), phi, x1, y1).value;
  CHECK(v <= 0.0);
  CHECK(v > -1e-20);

  Vector bad = pr.y;
  bad(0) = 0.5;
  CHECK_THROWS_AS(loglik(pr.spec, Vector::Zero(11), pr.x, bad), DomainError);
}

TEST_CASE("loglik gradient: 5 instances at 1e-6") {
  Rng rng(7, {"loglik_fd"});
  for (int c = 0; c < 5; ++c) {
    const Problem pr = random_problem(rng, 10, 50);
    Vector phi(11);
    for (int k = 0; k < 11; ++k) phi(k) = rng.normal(0.0, 0.5);
    const LogLik ll = loglik(pr.spec, phi, pr.x, pr.y);
    auto f = [&](const Vector& v) { return loglik(pr.spec, v, pr.x, pr.y).value; };
    CHECK(rel_err(ll.grad, central_diff(f, phi, 1e-5)) < 1e-6);
  }
}

TEST_CASE("mlp loglik gradient") {
  Rng rng(8, {"mlp_fd"});
  const PredictorSpec spec = PredictorSpec::mlp(3, 4);
  CHECK(spec.param_dim() == 3 * 4 + 4 + 4 + 1);
  Problem pr = random_problem(rng, 3, 40);
  Vector phi(spec.param_dim());
  for (int k = 0; k < phi.size(); ++k) phi(k) = rng.normal(0.0, 0.7);
  const LogLik ll = loglik(spec, phi, pr.x, pr.y);
  auto f = [&](const Vector& v) { return loglik(spec, v, pr.x, pr.y).value; };
  CHECK(rel_err(ll.grad, central_diff(f, phi, 1e-5)) < 1e-6);
}

TEST_CASE("elbo gradient with frozen noise: 5 instances at 1e-4") {
  Rng rng(9, {"elbo_fd"});
  for (int c = 0; c < 5; ++c) {
    const Problem pr = random_problem(rng, 4, 30);  // p = 5
    const DiagGaussian q = random_gaussian(rng, 5, -2.0, -0.5), prior = random_gaussian(rng, 5, -1.5, 0.0);
    const Matrix noise = standard_normal_matrix(rng, 10, 5);
    const double kw = 0.3;
    const ElboEstimate e = elbo_grad(q, prior, pr.x, pr.y, pr.spec, noise, kw);
    auto fm = [&](const Vector& v) { return elbo_grad({v, q.log_std}, prior, pr.x, pr.y, pr.spec, noise, kw).value; };
    auto fs = [&](const Vector& v) { return elbo_grad({q.mean, v}, prior, pr.x, pr.y, pr.spec, noise, kw).value; };
    CHECK(rel_err(e.grad_mean, central_diff(fm, q.mean, 1e-5)) < 1e-4);
    CHECK(rel_err(e.grad_log_std, central_diff(fs, q.log_std, 1e-5)) < 1e-4);
    CHECK(e.mc_samples == 10);
  }
}

TEST_CASE("elbo reductions") {
  Rng rng(10, {"elbo_red"});
  const Problem pr = random_problem(rng, 10, 40);
  DiagGaussian q = random_gaussian(rng, 11, -3.0, -2.0);
  // q equal to the prior: the KL term vanishes exactly.
  const Matrix noise = standard_normal_matrix(rng, 6, 11);
  const ElboEstimate with = elbo_grad(q, q, pr.x, pr.y, pr.spec, noise, 5.0);
  const ElboEstimate without = elbo_grad(q, q, pr.x, pr.y, pr.spec, noise, 0.0);
  CHECK(with.value == without.value);
  // Degenerate posterior, no KL: plain mean NLL at the mean.
  q.log_std.setConstant(-10.0);
  const ElboEstimate e = elbo_grad(q, DiagGaussian::standard(11), pr.x, pr.y, pr.spec, 500, 0.0, rng);
  const double nll = -loglik(pr.spec, q.mean, pr.x, pr.y).value / 40.0;
  CHECK(e.value == doctest::Approx(nll).epsilon(1e-6));
}

TEST_CASE("pathwise gradient is unbiased") {
  Rng rng(11, {"pathwise"});
  const Problem pr = random_problem(rng, 4, 30);
  const DiagGaussian q = random_gaussian(rng, 5, -1.0, -0.3), prior = DiagGaussian::standard(5);
  const int n = 10000;
  Matrix singles(n, 10);
  for (int k = 0; k < n; ++k) {
    const ElboEstimate e = elbo_grad(q, prior, pr.x, pr.y, pr.spec, 1, 0.1, rng);
    singles.row(k).head(5) = e.grad_mean.transpose();
    singles.row(k).tail(5) = e.grad_log_std.transpose();
  }
  const Vector avg = singles.colwise().mean().transpose();
  const Vector sd = ((singles.rowwise() - avg.transpose()).array().square().colwise().sum() / (n - 1)).sqrt();
  const ElboEstimate batch = elbo_grad(q, prior, pr.x, pr.y, pr.spec, n, 0.1, rng);
  Vector b(10);
  b << batch.grad_mean, batch.grad_log_std;
  // Both sides carry MC error of the same size.
  for (int k = 0; k < 10; ++k) CHECK(std::abs(avg(k) - b(k)) <= 3.0 * std::sqrt(2.0) * sd(k) / std::sqrt(n));
}

TEST_CASE("predictive scores and adam") {
  Rng rng(12, {"pred"});
  const Problem pr = random_problem(rng, 10, 20);
  const DiagGaussian q = DiagGaussian::isotropic(Vector::Zero(11), 1e-5);
  const Vector s = predictive_scores(pr.spec, q, pr.x, 10, rng);
  CHECK((s.array() - 0.5).abs().maxCoeff() < 1e-3);

  // Adam minimises a quadratic.
  Adam adam(0.1);
  Vector x = Vector::Constant(3, 5.0);
  for (int k = 0; k < 500; ++k) adam.step(x, 2.0 * x);
  CHECK(x.norm() < 0.05);
  CHECK(adam.steps() == 500);
}

TEST_CASE("gaussian json round trip") {
  Rng rng(13, {"json"});
  const DiagGaussian g = random_gaussian(rng, 7);
  const DiagGaussian back = gaussian_from_json(gaussian_to_json(g));
  CHECK(back.mean == g.mean);
  CHECK(back.log_std == g.log_std);
}
