#include <cmath>

#include "doctest.h"
#include "metacausal/eval.hpp"
#include "metacausal/metalearn.hpp"

using namespace metacausal;

namespace {
Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index k = 0;
  for (double x : v) out(k++) = x;
  return out;
}

// Brute-force pair count, the oracle for AUROC.
double auroc_pairs(const Vector& s, const Vector& y) {
  double num = 0, den = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    for (Eigen::Index j = 0; j < s.size(); ++j)
      if (y(i) == 1 && y(j) == 0) {
        den += 1;
        num += s(i) > s(j) ? 1.0 : (s(i) == s(j) ? 0.5 : 0.0);
      }
  return num / den;
}
}  // namespace

TEST_CASE("auroc examples") {
  CHECK(auroc(vec({0.1, 0.4, 0.35, 0.8}), vec({0, 0, 1, 1})) == doctest::Approx(0.75));
  CHECK(auroc(vec({0, 0, 1, 1}), vec({0, 0, 1, 1})) == 1.0);
  CHECK(auroc(vec({0.3, 0.3, 0.3, 0.3}), vec({0, 1, 0, 1})) == 0.5);
  CHECK(std::isnan(auroc(vec({0.1, 0.2}), vec({1, 1}))));
}

TEST_CASE("auroc matches pair enumeration and is rank invariant") {
  Rng rng(1, {"auroc"});
  for (int c = 0; c < 50; ++c) {
    const int n = 40;
    Vector s(n), y(n);
    for (int i = 0; i < n; ++i) {
      s(i) = std::round(rng.normal() * 4.0) / 4.0;  // force ties
      y(i) = i % 3 == 0 ? 1.0 : 0.0;
    }
    const double a = auroc(s, y);
    CHECK(a == doctest::Approx(auroc_pairs(s, y)).epsilon(1e-12));
    CHECK(auroc(s.array().exp().matrix(), y) == doctest::Approx(a).epsilon(1e-12));
    CHECK(auroc((3.0 * s.array() - 7.0).matrix(), y) == doctest::Approx(a).epsilon(1e-12));
  }
}

TEST_CASE("log loss and negative transfer") {
  const Vector y = vec({1, 0, 1, 0});
  const Vector perfect = y;
  const Vector half = Vector::Constant(4, 0.5);
  CHECK(std::isfinite(log_loss(vec({0, 1, 0, 1}), y)));
  CHECK(log_loss(vec({0, 1, 0, 1}), y) == doctest::Approx(-std::log(kProbClamp)));
  CHECK(negative_transfer(half, half, y) == 0.0);
  CHECK(negative_transfer(perfect, half, y) == doctest::Approx(-std::log(2.0)).epsilon(1e-9));
  const Vector a = vec({0.7, 0.2, 0.6, 0.4}), b = vec({0.5, 0.5, 0.9, 0.1});
  CHECK(negative_transfer(a, b, y) == doctest::Approx(-negative_transfer(b, a, y)));
  CHECK_THROWS(negative_transfer(a, vec({0.5}), y));
}

TEST_CASE("prior-induced risk") {
  const PredictorSpec spec = PredictorSpec::linear(2);
  Rng rng(2, {"risk"});
  const int n = 400;
  Matrix x(n, 2);
  Vector y(n);
  for (int i = 0; i < n; ++i) {
    x(i, 0) = rng.normal();
    x(i, 1) = rng.normal();
    y(i) = x(i, 0) > 0 ? 1.0 : 0.0;
  }
  Vector perfect(3);
  perfect << 50.0, 0.0, 0.0;
  const RiskEstimate r0 = prior_induced_risk(spec, DiagGaussian::isotropic(perfect, 1e-3), x, y, 200, rng);
  CHECK(r0.value < 1e-9);
  // Prior dominated by a huge bias: always predicts one class.
  Vector far(3);
  far << 0.0, 0.0, -1e4;
  const RiskEstimate rf = prior_induced_risk(spec, DiagGaussian::isotropic(far, 1.0), x, y, 200, rng);
  CHECK(rf.value == doctest::Approx(y.mean()).epsilon(1e-12));
  // Standard error falls like 1/sqrt(n).
  const DiagGaussian wide = DiagGaussian::isotropic(Vector::Zero(3), 1.0);
  const RiskEstimate a = prior_induced_risk(spec, wide, x, y, 1000, rng);
  const RiskEstimate b = prior_induced_risk(spec, wide, x, y, 4000, rng);
  CHECK(b.std_err / a.std_err == doctest::Approx(0.5).epsilon(0.3));
  const RiskEstimate c = prior_induced_risk(spec, wide, x, y, 2000, rng);
  CHECK(c.std_err / a.std_err == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(0.3));
  CHECK(a.value >= 0.0);
  CHECK(a.value <= 1.0);
}

TEST_CASE("lipschitz check") {
  Matrix w = Matrix::Zero(11, 4);
  w(0, 0) = 0.5;
  CHECK(lipschitz_constant(w, 0.05) == doctest::Approx(5.0));
  const PredictorSpec spec = PredictorSpec::linear(10);
  Rng rng(3, {"lip"});
  Matrix x(100, 10);
  Vector y(100);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  for (int i = 0; i < 100; ++i) y(i) = x(i, 0) > 0 ? 1.0 : 0.0;
  const Vector z = Vector::Constant(4, 0.3);
  const LipschitzCheck same = check_lipschitz(spec, Vector::Zero(11), w, 0.05, z, z, x, y, 500, rng);
  CHECK(same.rhs == 0.0);
  CHECK(same.holds);
  CHECK_THROWS_AS(check_lipschitz(spec, Vector::Zero(11), w, 0.05, Vector::Zero(3), Vector::Zero(3), x, y, 100, rng),
                  DomainError);
}

TEST_CASE("epsilon decomposition") {
  Matrix w = Matrix::Identity(11, 4) * 0.5;
  const Vector z = vec({2, 2, 2, 2});
  const EpsDecomposition e0 = eps_decomposition(z, z, z, Vector::Zero(4), w, 0.05);
  CHECK(e0.eps_expert == 0.0);
  CHECK(e0.eps_causal == 0.0);
  CHECK(e0.eps_ood == doctest::Approx(4.0));
  CHECK(e0.bound == doctest::Approx(5.0 * 4.0));
  Rng rng(4, {"tri"});
  for (int c = 0; c < 1000; ++c) {
    Vector a(4), b(4), h(4), m(4);
    for (int k = 0; k < 4; ++k) {
      a(k) = rng.normal();
      b(k) = rng.normal();
      h(k) = rng.normal();
      m(k) = rng.normal();
    }
    const EpsDecomposition e = eps_decomposition(a, b, h, m, w, 0.05);
    CHECK((h - m).norm() <= e.total() + 1e-9);
    CHECK(e.eps_ood >= 0.0);
  }
}

TEST_CASE("negative-transfer mitigation report") {
  std::vector<NtRun> runs;
  for (int k = 0; k < 10; ++k) runs.push_back({static_cast<std::uint64_t>(k), 4.0, 0.1 * k, 0.1 * k, 4.0, 0.0, 0.0});
  const NtMitigationReport same = check_nt_mitigation(runs);
  CHECK(same.condition_met);
  CHECK(same.mean_difference == 0.0);
  CHECK_FALSE(same.violation);

  std::vector<NtRun> better;
  for (int k = 0; k < 10; ++k)
    better.push_back({static_cast<std::uint64_t>(k), 4.0, -0.05 + 0.001 * k, 0.2 + 0.01 * k, 4.0, 0.0, 0.0});
  const NtMitigationReport r = check_nt_mitigation(better);
  CHECK(r.mean_nt_causal < r.mean_nt_global);
  CHECK(r.ci_high < 0.0);
  CHECK_FALSE(r.violation);

  // Runs failing eps_expert + eps_causal <= eps_ood are excluded.
  std::vector<NtRun> unmet{{0, 0.0, 0.1, 0.0, 0.01, 0.5, 0.5}};
  const NtMitigationReport none = check_nt_mitigation(unmet);
  CHECK_FALSE(none.condition_met);
  CHECK(none.message == "condition never met");
  CHECK(none.n_runs == 1);
  CHECK(none.n_condition_met == 0);
}
