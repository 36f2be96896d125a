#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "metacausal/eval.hpp"
#include "metacausal/experiments.hpp"
#include "metacausal/metalearn.hpp"

using namespace metacausal;

namespace {

// The step-0 log entry carries a NaN loss.
bool same_bits(double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); }

// Small toy task: one feature, labels from its sign with some flips.
TaskDataset toy_task(std::uint64_t seed, int rows, int input_dim = 1) {
  TaskDataset t;
  t.task_id = "toy" + std::to_string(seed);
  t.x.resize(rows, input_dim);
  t.y.resize(rows);
  Rng rng(seed, {"toy"});
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < input_dim; ++j) t.x(i, j) = rng.normal();
    const double f = 1.5 * t.x(i, 0) + 0.3 + rng.normal(0.0, 0.7);
    t.y(i) = f > 0 ? 1.0 : 0.0;
  }
  return t;
}

HyperParams preset() { return default_experiment_config().hyper; }

World small_world(std::uint64_t seed) {
  return generate_experiment_world(make_generator_spec(GeneratorConfig{}, seed));
}

}  // namespace

TEST_CASE("embedding-conditioned prior") {
  HyperParams h;
  MetaState st = init_meta_state(PredictorSpec::linear(10), h, 4, 1);
  Rng rng(1, {"prior"});
  for (int k = 0; k < 11; ++k) st.lambda.mean(k) = rng.normal();
  TaskEmbedding z{Vector::Constant(4, 0.7)};

  // W = 0 and z = 0 both give the global prior N(mu, sigma^2 I).
  DiagGaussian p = prior_for_task(st, z);
  CHECK(p.mean == st.lambda.mean);
  CHECK((p.log_std.array() == std::log(h.prior_sd)).all());
  st.w_emb = Matrix::Random(11, 4);
  CHECK(prior_for_task(st, {Vector::Zero(4)}).mean == st.lambda.mean);

  // A displacement ten times over the cap is rescaled to exactly the cap.
  const double mu = st.lambda.mean.norm();
  REQUIRE(mu > 1.0);
  const double cap = h.adapt_scale * mu;
  const Vector d = st.w_emb * z.z;
  st.w_emb *= 10.0 * cap / d.norm();
  CHECK((prior_for_task(st, z).mean - st.lambda.mean).norm() == doctest::Approx(cap).epsilon(1e-12));
  CHECK_THROWS_AS(prior_for_task(st, {Vector::Zero(3)}), DomainError);
}

TEST_CASE("prior displacement bound on random states") {
  Rng rng(2, {"disp"});
  for (int c = 0; c < 200; ++c) {
    HyperParams h;
    h.adapt_scale = rng.uniform(0.01, 3.0);
    MetaState st = init_meta_state(PredictorSpec::linear(10), h, 4, 1);
    const double scale = rng.uniform(0.0, 3.0);
    for (int k = 0; k < 11; ++k) st.lambda.mean(k) = rng.normal(0.0, scale);
    for (Eigen::Index k = 0; k < st.w_emb.size(); ++k) st.w_emb.data()[k] = rng.normal();
    Vector z(4);
    for (int k = 0; k < 4; ++k) z(k) = rng.normal(0.0, 3.0);
    const double bound = h.adapt_scale * std::max(st.lambda.mean.norm(), 1.0);
    CHECK(prior_displacement(st, {z}).norm() <= bound + 1e-9);
  }
}

TEST_CASE("inner adaptation") {
  HyperParams h = preset();
  const MetaState st = init_meta_state(PredictorSpec::linear(1), h, 1, 3);
  const TaskDataset t = toy_task(3, 80);
  Rng rng(3, {"inner"});
  const TaskPosterior none = inner_adapt(st, {Vector::Zero(1)}, t.x, t.y, rng, AdaptOptions{0});
  CHECK(none.psi.mean == none.prior_mean_used);
  CHECK_THROWS_AS(inner_adapt(st, {Vector::Zero(1)}, Matrix(0, 1), Vector(0), rng), DomainError);

  // Separable support: many steps push the support NLL below ln 2 per row.
  TaskDataset sep = t;
  for (Eigen::Index i = 0; i < sep.x.rows(); ++i) sep.y(i) = sep.x(i, 0) > 0 ? 1.0 : 0.0;
  const TaskPosterior post = inner_adapt(st, {Vector::Zero(1)}, sep.x, sep.y, rng, AdaptOptions{200});
  const double nll = -loglik(st.predictor, post.psi.mean, sep.x, sep.y).value / static_cast<double>(sep.x.rows());
  CHECK(nll < std::log(2.0));

  // Same stream, same posterior.
  Rng r1(9, {"det"}), r2(9, {"det"});
  CHECK(inner_adapt(st, {Vector::Zero(1)}, t.x, t.y, r1).psi.mean ==
        inner_adapt(st, {Vector::Zero(1)}, t.x, t.y, r2).psi.mean);
}

TEST_CASE("inner loss is non-increasing over four steps on most tasks") {
  const HyperParams h = preset();
  int good = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const World w = small_world(seed);
    const MetaState st = init_meta_state(PredictorSpec::linear(10), h, 4, seed);
    for (const TaskDataset& t : w.sources) {
      std::vector<double> trace;
      Rng rng(seed, {"mono", t.task_id});
      AdaptOptions opt{4, 0, &trace};
      (void)inner_adapt(st, t.embedding_true, t.x, t.y, rng, opt);
      bool mono = true;
      for (std::size_t k = 1; k < trace.size(); ++k) mono = mono && trace[k] <= trace[k - 1];
      good += mono;
      ++total;
    }
  }
  CHECK(good >= 0.95 * total);
}

TEST_CASE("first-order W gradient is the outer product with z") {
  HyperParams h = preset();
  h.adapt_scale = 100.0;
  MetaState st = init_meta_state(PredictorSpec::linear(1), h, 2, 4);
  st.lambda.mean << 0.4, -0.2;
  st.w_emb << 0.1, -0.3, 0.2, 0.05;
  const TaskDataset t = toy_task(4, 120);
  Vector zv(2);
  zv << 0.8, -0.5;
  std::vector<Eigen::Index> pool;
  for (Eigen::Index i = 0; i < t.rows(); ++i) pool.push_back(i);
  const MetaTask task{&t, {zv}, pool};
  Matrix gw = Matrix::Zero(2, 2);
  Vector gm = Vector::Zero(2);
  for (int k = 0; k < 4; ++k) {
    Rng rng(4, {"rank1", k});
    const OuterGrad g = task_outer_gradient(st, task, draw_task_noise(st, task, rng));
    gw += g.w;
    gm += g.mean;
  }
  CHECK((gw - gm * zv.transpose()).norm() < 1e-12 * std::max(1.0, gw.norm()));
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(gw);
  CHECK(svd.singularValues()(1) < 1e-12 * svd.singularValues()(0));
}

TEST_CASE("first-order gradient is within 10 percent of the unrolled gradient on a 2-parameter toy") {
  HyperParams h = preset();
  h.inner_steps = 1;
  h.inner_lr = 0.5;
  h.adapt_scale = 100.0;
  h.samples_per_batch = 60;
  MetaState st = init_meta_state(PredictorSpec::linear(1), h, 1, 5);
  st.lambda.mean << 0.5, 0.1;
  st.w_emb << 0.3, -0.2;
  const TaskDataset t = toy_task(5, 100);
  std::vector<Eigen::Index> pool;
  for (Eigen::Index i = 0; i < t.rows(); ++i) pool.push_back(i);
  const MetaTask task{&t, {Vector::Constant(1, 1.2)}, pool};
  Rng rng(5, {"toy_unrolled"});
  const TaskNoise noise = draw_task_noise(st, task, rng);
  const OuterGrad fo = task_outer_gradient(st, task, noise);
  MetaState un = st;
  un.hyper.outer_gradient = OuterGradient::unrolled;
  const OuterGrad ur = task_outer_gradient(un, task, noise);
  const Vector a = Eigen::Map<const Vector>(fo.w.data(), 2);
  const Vector b = Eigen::Map<const Vector>(ur.w.data(), 2);
  MESSAGE("first-order " << a.transpose() << " unrolled " << b.transpose());
  CHECK(testing_util::rel_err(a, b) < 0.10);
}

TEST_CASE("hyperprior KL gradient") {
  // d/dmu KL(q || N(0, I)) = mu, so the scaled term contributes T2 mu / prior_scaling.
  Rng rng(6, {"hyperkl"});
  DiagGaussian q{Vector(5), Vector::Constant(5, std::log(0.05))};
  for (int k = 0; k < 5; ++k) q.mean(k) = rng.normal();
  const KlGrad g = kl_diag_grad(q, DiagGaussian::standard(5));
  CHECK((g.q_mean - q.mean).norm() < 1e-14);
}

TEST_CASE("outer updates keep W inside the cap") {
  HyperParams h = preset();
  h.w_cap = 0.5;
  h.w_lr = 0.5;
  h.gamma_w = 1e-12;
  const World w = small_world(7);
  const EmbeddingSet emb = make_embedding_set(std::span<const TaskDataset>(w.sources));
  MetaState st = init_meta_state(PredictorSpec::linear(10), h, 4, 7);
  std::vector<MetaTask> tasks;
  for (std::size_t k = 0; k < 4; ++k) {
    std::vector<Eigen::Index> pool;
    for (Eigen::Index i = 0; i < w.sources[k].rows(); ++i) pool.push_back(i);
    tasks.push_back({&w.sources[k], emb.at(static_cast<Eigen::Index>(k)), pool});
  }
  double max_norm = 0.0;
  for (int step = 0; step < 30; ++step) {
    Rng rng(7, {"proj", step});
    (void)outer_update(st, tasks, rng);
    const double n = spectral_norm(st.w_emb);
    max_norm = std::max(max_norm, n);
    CHECK(n <= 0.5 + 1e-9);
  }
  CHECK(max_norm > 0.4);  // the cap was actually reached
  Rng spare(0, {"empty"});
  CHECK_THROWS_AS(outer_update(st, {}, spare), DomainError);
}

TEST_CASE("large W penalty drives W to zero") {
  const World w = small_world(8);
  const EmbeddingSet emb = make_embedding_set(std::span<const TaskDataset>(w.sources));
  auto run = [&](double gamma) {
    HyperParams h = preset();
    h.gamma_w = gamma;
    MetaState st = init_meta_state(PredictorSpec::linear(10), h, 4, 8);
    st.w_emb.setConstant(0.5);
    std::vector<MetaTask> tasks;
    for (std::size_t k = 0; k < 4; ++k) {
      std::vector<Eigen::Index> pool;
      for (Eigen::Index i = 0; i < w.sources[k].rows(); ++i) pool.push_back(i);
      tasks.push_back({&w.sources[k], emb.at(static_cast<Eigen::Index>(k)), pool});
    }
    for (int step = 0; step < 200; ++step) {
      Rng rng(8, {"gamma", step});
      (void)outer_update(st, tasks, rng);
    }
    return spectral_norm(st.w_emb);
  };
  const double free_norm = run(1e-12), pinned = run(1e6);
  MESSAGE("||W|| gamma=0: " << free_norm << ", gamma=1e6: " << pinned);
  CHECK(pinned < 0.05);
  CHECK(pinned < 0.25 * free_norm);
}

TEST_CASE("meta-training") {
  const World w = small_world(9);
  const EmbeddingSet emb = make_embedding_set(std::span<const TaskDataset>(w.sources));
  const HyperParams h = preset();
  const MetaState init = init_meta_state(PredictorSpec::linear(10), h, 4, 9);

  Schedule zero;
  zero.max_steps = 0;
  const TrainResult none = meta_train(init, w.sources, emb, zero);
  CHECK(none.state.lambda.mean == init.lambda.mean);
  CHECK(none.state.step_count == 0);

  Schedule s;
  s.max_steps = 300;
  s.min_steps = 0;
  s.patience = 1000;
  const TrainResult a = meta_train(init, w.sources, emb, s);
  const TrainResult b = meta_train(init, w.sources, emb, s);
  MESSAGE("best validation AUROC " << a.best_val_auroc << " at step " << a.best_step);
  CHECK(a.best_val_auroc >= 0.75);
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t k = 0; k < a.log.size(); ++k) {
    CHECK(same_bits(a.log[k].loss, b.log[k].loss));
    CHECK(a.log[k].w_norm == b.log[k].w_norm);
  }
  CHECK(a.state.w_emb == b.state.w_emb);

  // Checkpoint round trip.
  const MetaState back = checkpoint_from_json(checkpoint_to_json(a.state));
  CHECK(back.lambda.mean == a.state.lambda.mean);
  CHECK(back.w_emb == a.state.w_emb);
  CHECK(back.step_count == a.state.step_count);
  CHECK_THROWS_AS(checkpoint_from_json(json{{"hyper", 1}}), ConfigError);
}

TEST_CASE("frozen W reproduces the zero-embedding trajectory bitwise") {
  const World w = small_world(10);
  const EmbeddingSet emb = make_embedding_set(std::span<const TaskDataset>(w.sources));
  EmbeddingSet zero = emb;
  zero.z.setZero();
  HyperParams frozen = preset();
  frozen.freeze_w = true;
  Schedule s;
  s.max_steps = 60;
  s.min_steps = 0;
  const TrainResult a = meta_train(init_meta_state(PredictorSpec::linear(10), frozen, 4, 10), w.sources, emb, s);
  const TrainResult b = meta_train(init_meta_state(PredictorSpec::linear(10), preset(), 4, 10), w.sources, zero, s);
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t k = 0; k < a.log.size(); ++k) CHECK(same_bits(a.log[k].loss, b.log[k].loss));
  CHECK(a.state.lambda.mean == b.state.lambda.mean);
  CHECK(b.state.w_emb.norm() == 0.0);

  // Adaptation with z = 0 equals adaptation under the same state with W removed.
  MetaState trained = b.state;
  trained.w_emb.setRandom();
  MetaState no_w = trained;
  no_w.w_emb.setZero();
  const TaskSplit split = make_split(w.targets[3], 0.3, 10);
  const Prediction p1 = adapt_and_predict(trained, {Vector::Zero(4)}, w.targets[3], split, 10);
  const Prediction p2 = adapt_and_predict(no_w, w.targets[3].embedding_true, w.targets[3], split, 10);
  CHECK(p1.scores == p2.scores);
}

TEST_CASE("predictive scores converge with more samples") {
  const World w = small_world(11);
  MetaState st = init_meta_state(PredictorSpec::linear(10), preset(), 4, 11);
  st.hyper.init_log_std = -0.5;  // wide posterior so the MC error is visible
  const TaskSplit split = make_split(w.targets[1], 0.3, 11);
  auto scores = [&](int s, std::uint64_t seed) {
    MetaState c = st;
    c.hyper.mc_samples = s;
    return adapt_and_predict(c, w.targets[1].embedding_true, w.targets[1], split, seed).scores;
  };
  double mse1 = 0.0, mse10 = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Vector ref = scores(1000, 1000 + seed);
    mse1 += (scores(1, seed) - ref).squaredNorm();
    mse10 += (scores(10, seed) - ref).squaredNorm();
  }
  CHECK(scores(1, 0) != scores(10, 0));
  CHECK(mse10 < mse1);
}

TEST_CASE("split helpers") {
  const World w = small_world(12);
  const TaskSplit s = make_split(w.targets[0], 0.3, 12);
  CHECK(s.test.size() == 150);
  CHECK(s.train.size() == 350);
  std::vector<Eigen::Index> all = s.train;
  all.insert(all.end(), s.test.begin(), s.test.end());
  std::sort(all.begin(), all.end());
  for (std::size_t k = 0; k < all.size(); ++k) CHECK(all[k] == static_cast<Eigen::Index>(k));
  CHECK_THROWS_AS(make_split(w.targets[0], 1.0, 12), ConfigError);
  TaskSplit empty;
  CHECK_THROWS_AS(adapt_and_predict(init_meta_state(PredictorSpec::linear(10), preset(), 4, 1),
                                    {Vector::Zero(4)}, w.targets[0], empty, 1),
                  DomainError);
}

TEST_CASE("no-transfer BNN") {
  const World w = small_world(13);
  const TaskSplit split = make_split(w.targets[2], 0.3, 13);
  const BnnHyper h = default_experiment_config().bnn;
  const PredictorSpec pred = PredictorSpec::linear(10);
  CHECK(train_bnn_baseline(pred, w.targets[2], split, h, 13).scores ==
        train_bnn_baseline(pred, w.targets[2], split, h, 13).scores);
  CHECK(auroc(train_bnn_baseline(pred, w.targets[2], split, h, 13).scores, take_rows(w.targets[2].y, split.test)) >
        0.7);

  // Pure-noise labels: AUROC near one half on average.
  double sum = 0.0;
  const int n = 10;
  for (int seed = 0; seed < n; ++seed) {
    TaskDataset noise = w.targets[2];
    Rng rng(static_cast<std::uint64_t>(seed), {"noise_labels"});
    for (Eigen::Index i = 0; i < noise.y.size(); ++i) noise.y(i) = rng.uniform() < 0.3 ? 1.0 : 0.0;
    const TaskSplit sp = make_split(noise, 0.3, static_cast<std::uint64_t>(seed));
    sum += auroc(train_bnn_baseline(pred, noise, sp, h, static_cast<std::uint64_t>(seed)).scores,
                 take_rows(noise.y, sp.test));
  }
  CHECK(std::abs(sum / n - 0.5) <= 0.05);
}

TEST_CASE("first-order MAML with no outer steps is fine-tuning from the random init") {
  const World w = small_world(14);
  const TaskSplit split = make_split(w.targets[0], 0.3, 14);
  MamlHyper h;
  h.outer_steps = 0;
  const PredictorSpec pred = PredictorSpec::linear(10);
  const MamlResult m = train_fomaml_baseline(pred, w.sources, w.targets[0], split, h, 0.3, 14);
  Rng init(14, {"maml", "init"});
  Vector theta(11);
  for (int k = 0; k < 11; ++k) theta(k) = init.normal(0.0, h.init_sd);
  CHECK(m.theta == theta);
  const Matrix x = take_rows(w.targets[0].x, split.train);
  const Vector y = take_rows(w.targets[0].y, split.train);
  for (int k = 0; k < h.inner_steps; ++k) theta += h.inner_lr * loglik(pred, theta, x, y).grad / double(x.rows());
  CHECK((m.prediction.posterior.psi.mean - theta).norm() < 1e-12);
}
