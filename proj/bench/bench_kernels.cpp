// OpenMP kernels against their serial references. Arg(0) is serial, Arg(1) parallel.
#include <benchmark/benchmark.h>

#include "metacausal/kernels.hpp"

using namespace metacausal;

namespace {

Matrix gaussian(Rng& rng, Eigen::Index r, Eigen::Index c, double sd = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, sd);
  return m;
}

Vector labels(Rng& rng, Eigen::Index n) {
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) y(i) = rng.uniform() < 0.3 ? 1.0 : 0.0;
  return y;
}

void BM_loglik(benchmark::State& st) {
  Rng rng(1, {"bench_ll"});
  const PredictorSpec spec = PredictorSpec::linear(10);
  const Matrix x = gaussian(rng, 20000, 10);
  const Vector y = labels(rng, 20000);
  const Vector phi = gaussian(rng, 11, 1);
  Vector g;
  for (auto _ : st) {
    const double v = st.range(0) ? kernels::loglik_rows(spec, phi, x, y, g)
                                 : kernels::serial::loglik_rows(spec, phi, x, y, g);
    benchmark::DoNotOptimize(v);
  }
}
BENCHMARK(BM_loglik)->Arg(0)->Arg(1);

void BM_bald_pool(benchmark::State& st) {
  Rng rng(2, {"bench_bald"});
  const Matrix src = gaussian(rng, 20, 10, 0.8);
  const Matrix samples = gaussian(rng, 200, 10);
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < 20; ++i)
    for (int j = i + 1; j < 20; ++j) pairs.emplace_back(i, j);
  for (auto _ : st) {
    auto v = st.range(0) ? kernels::bald_eig_pool(pairs, src, samples, 1.0)
                         : kernels::serial::bald_eig_pool(pairs, src, samples, 1.0);
    benchmark::DoNotOptimize(v.data());
  }
}
BENCHMARK(BM_bald_pool)->Arg(0)->Arg(1);

void BM_mc_kl(benchmark::State& st) {
  const DiagGaussian q{Vector::Constant(11, 0.2), Vector::Constant(11, -0.5)};
  const DiagGaussian p{Vector::Constant(11, -0.1), Vector::Constant(11, 0.1)};
  for (auto _ : st) {
    const auto e = st.range(0) ? kernels::mc_kl(q, p, 200000, 7) : kernels::serial::mc_kl(q, p, 200000, 7);
    benchmark::DoNotOptimize(e.mean);
  }
}
BENCHMARK(BM_mc_kl)->Arg(0)->Arg(1);

void BM_zero_one_risks(benchmark::State& st) {
  Rng rng(3, {"bench_risk"});
  const PredictorSpec spec = PredictorSpec::linear(10);
  const Matrix x = gaussian(rng, 500, 10);
  const Vector y = labels(rng, 500);
  const Matrix phi = gaussian(rng, 400, 11);
  for (auto _ : st) {
    auto v = st.range(0) ? kernels::zero_one_risks(spec, phi, x, y) : kernels::serial::zero_one_risks(spec, phi, x, y);
    benchmark::DoNotOptimize(v.data());
  }
}
BENCHMARK(BM_zero_one_risks)->Arg(0)->Arg(1);

}  // namespace

BENCHMARK_MAIN();
