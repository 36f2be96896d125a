#include <cmath>

#include "doctest.h"
#include "metacausal/kernels.hpp"

using namespace metacausal;

TEST_CASE("parallel loglik equals the serial reference") {
  Rng rng(1, {"k_ll"});
  const PredictorSpec spec = PredictorSpec::linear(10);
  Matrix x(5000, 10);
  Vector y(5000), phi(11);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < 10; ++j) x(i, j) = rng.normal();
    y(i) = rng.uniform() < 0.3 ? 1.0 : 0.0;
  }
  for (int k = 0; k < 11; ++k) phi(k) = rng.normal();
  Vector g1, g2;
  const double a = kernels::loglik_rows(spec, phi, x, y, g1);
  const double b = kernels::serial::loglik_rows(spec, phi, x, y, g2);
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
  CHECK((g1 - g2).norm() <= 1e-10 * g2.norm());
}

TEST_CASE("parallel BALD pool equals the serial reference") {
  Rng rng(2, {"k_bald"});
  Matrix src(20, 4), samples(200, 4);
  for (Eigen::Index i = 0; i < src.size(); ++i) src.data()[i] = rng.normal(0.0, 0.8);
  for (Eigen::Index i = 0; i < samples.size(); ++i) samples.data()[i] = rng.normal();
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < 20; ++i)
    for (int j = i + 1; j < 20; ++j) pairs.emplace_back(i, j);
  CHECK(pairs.size() == 190);
  const auto a = kernels::bald_eig_pool(pairs, src, samples, 1.0);
  const auto b = kernels::serial::bald_eig_pool(pairs, src, samples, 1.0);
  REQUIRE(a.size() == b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a[k] == b[k]);
    CHECK(a[k] >= 0.0);
    CHECK(a[k] <= std::log(2.0) + 1e-12);
  }
}

TEST_CASE("parallel Monte Carlo KL equals the serial reference") {
  DiagGaussian q{Vector::Constant(3, 0.2), Vector::Constant(3, -0.5)};
  DiagGaussian p{Vector::Constant(3, -0.1), Vector::Constant(3, 0.1)};
  const auto a = kernels::mc_kl(q, p, 100000, 7);
  const auto b = kernels::serial::mc_kl(q, p, 100000, 7);
  CHECK(a.mean == doctest::Approx(b.mean).epsilon(1e-12));
  CHECK(a.std_err == doctest::Approx(b.std_err).epsilon(1e-9));
}

TEST_CASE("parallel zero-one risks equal the serial reference") {
  Rng rng(3, {"k_risk"});
  const PredictorSpec spec = PredictorSpec::linear(4);
  Matrix x(300, 4), phi(500, 5);
  Vector y(300);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < phi.size(); ++i) phi.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = rng.uniform() < 0.5 ? 1.0 : 0.0;
  CHECK(kernels::zero_one_risks(spec, phi, x, y) == kernels::serial::zero_one_risks(spec, phi, x, y));
}

TEST_CASE("scalar helpers") {
  // erf oracle for the normal CDF.
  for (double v : {-6.0, -1.96, -0.3, 0.0, 0.7, 1.96, 5.0})
    CHECK(kernels::std_normal_cdf(v) == doctest::Approx(0.5 * std::erfc(-v / std::sqrt(2.0))).epsilon(1e-14));
  CHECK(kernels::std_normal_cdf(1.96) == doctest::Approx(0.975).epsilon(1e-4));
  CHECK(kernels::std_normal_cdf(0.0) == 0.5);
  CHECK(std::isfinite(kernels::log_std_normal_cdf(-40.0)));
  CHECK(kernels::log_std_normal_cdf(-40.0) < -800.0);
  CHECK(kernels::log_std_normal_cdf(0.5) == doctest::Approx(std::log(kernels::std_normal_cdf(0.5))));
  for (double v : {-30.0, -5.0, 0.0, 2.0}) {
    const double h = 1e-6;
    const double fd = (kernels::log_std_normal_cdf(v + h) - kernels::log_std_normal_cdf(v - h)) / (2 * h);
    CHECK(kernels::inverse_mills(v) == doctest::Approx(fd).epsilon(1e-6));
  }
  CHECK(kernels::binary_entropy(0.5) == doctest::Approx(std::log(2.0)));
  CHECK(kernels::binary_entropy(0.0) == 0.0);
  CHECK(kernels::binary_entropy(1.0) == 0.0);
}
