#include "metacausal/metalearn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "metacausal/eval.hpp"
#include "metacausal/logging.hpp"

namespace metacausal {

namespace {

bool all_finite(const Vector& v) { return v.allFinite(); }

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

// Rows drawn without replacement from pool (partial Fisher-Yates).
std::vector<Eigen::Index> draw_rows(const std::vector<Eigen::Index>& pool, std::size_t count, Rng& rng) {
  std::vector<Eigen::Index> rows = pool;
  count = std::min(count, rows.size());
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t k = i + static_cast<std::size_t>(rng.below(rows.size() - i));
    std::swap(rows[i], rows[k]);
  }
  rows.resize(count);
  return rows;
}

std::vector<Eigen::Index> all_rows(Eigen::Index n) {
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), Eigen::Index{0});
  return rows;
}

double support_kl_weight(const HyperParams& h, Eigen::Index rows) {
  return h.inner_temp / static_cast<double>(rows);
}

struct InnerRun {
  DiagGaussian psi;
  std::vector<double> losses;
};

// K plain SGD steps from (prior mean, init_log_std) with the given per-step noise.
InnerRun run_inner(const MetaState& state, const DiagGaussian& prior, const Matrix& x, const Vector& y,
                   const std::vector<Matrix>& noise) {
  const HyperParams& h = state.hyper;
  InnerRun run;
  run.psi.mean = prior.mean;
  run.psi.log_std = Vector::Constant(prior.dim(), h.init_log_std);
  const double kl_w = support_kl_weight(h, x.rows());
  for (std::size_t k = 0; k < noise.size(); ++k) {
    const ElboEstimate e = elbo_grad(run.psi, prior, x, y, state.predictor, noise[k], kl_w);
    if (!std::isfinite(e.value) || !all_finite(e.grad_mean) || !all_finite(e.grad_log_std)) {
      throw NumericalError(fmt("inner loop diverged: lr=%g step=%g grad_norm=%g", h.inner_lr,
                               static_cast<double>(k), e.grad_mean.norm()));
    }
    run.losses.push_back(e.value);
    run.psi.mean -= h.inner_lr * e.grad_mean;
    run.psi.log_std -= h.inner_lr * e.grad_log_std;
  }
  return run;
}

double query_nll(const MetaState& state, const DiagGaussian& psi, const Matrix& x, const Vector& y,
                 const Matrix& noise, Vector* grad_mean) {
  const ElboEstimate e = elbo_grad(psi, psi, x, y, state.predictor, noise, 0.0);
  if (grad_mean) *grad_mean = e.grad_mean;
  return e.value;
}

// Gradient of ||W||_2^2.
Matrix spectral_sq_grad(const Matrix& w) {
  if (w.size() == 0) return w;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const double s1 = svd.singularValues()(0);
  return 2.0 * s1 * svd.matrixU().col(0) * svd.matrixV().col(0).transpose();
}

void project_spectral(Matrix& w, double cap) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Vector s = svd.singularValues();
  if (s.size() == 0 || s(0) <= cap) return;
  for (Eigen::Index k = 0; k < s.size(); ++k) s(k) = std::min(s(k), cap);
  w = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
  // Reconstruction round-off can leave the norm a hair above the cap.
  const double after = spectral_norm(w);
  if (after > cap) w *= cap / after;
}

struct Batch {
  Matrix x;
  Vector y;
};

Batch gather(const TaskDataset& data, const std::vector<Eigen::Index>& rows) {
  return {take_rows(data.x, rows), take_rows(data.y, rows)};
}

}  // namespace

void HyperParams::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string("hyper.") + name + " must be positive");
  };
  positive(inner_lr, "inner_lr");
  positive(outer_lr, "outer_lr");
  positive(w_lr, "w_lr");
  positive(inner_temp, "inner_temp");
  positive(outer_temp, "outer_temp");
  positive(prior_sd, "prior_sd");
  positive(prior_scaling, "prior_scaling");
  positive(gamma_w, "gamma_w");
  positive(adapt_scale, "adapt_scale");
  positive(w_cap, "w_cap");
  positive(w_grad_clip, "w_grad_clip");
  positive(hyperprior_sd, "hyperprior_sd");
  if (!std::isfinite(init_log_std)) throw ConfigError("hyper.init_log_std must be finite");
  if (inner_steps < 1) throw ConfigError("hyper.inner_steps must be at least 1");
  if (mc_samples < 1) throw ConfigError("hyper.mc_samples must be at least 1");
  if (tasks_per_batch < 1) throw ConfigError("hyper.tasks_per_batch must be at least 1");
  if (samples_per_batch < 2) throw ConfigError("hyper.samples_per_batch must be at least 2");
}

json hyper_to_json(const HyperParams& h) {
  return json{{"inner_lr", h.inner_lr},
              {"outer_lr", h.outer_lr},
              {"w_lr", h.w_lr},
              {"inner_steps", h.inner_steps},
              {"inner_temp", h.inner_temp},
              {"outer_temp", h.outer_temp},
              {"prior_sd", h.prior_sd},
              {"prior_scaling", h.prior_scaling},
              {"init_log_std", h.init_log_std},
              {"gamma_w", h.gamma_w},
              {"adapt_scale", h.adapt_scale},
              {"w_cap", h.w_cap},
              {"w_grad_clip", h.w_grad_clip},
              {"mc_samples", h.mc_samples},
              {"tasks_per_batch", h.tasks_per_batch},
              {"samples_per_batch", h.samples_per_batch},
              {"test_inner_steps", h.test_inner_steps},
              {"hyperprior_sd", h.hyperprior_sd},
              {"outer_gradient", h.outer_gradient == OuterGradient::first_order ? "first_order" : "unrolled"},
              {"freeze_w", h.freeze_w}};
}

HyperParams hyper_from_json(const json& j, HyperParams h) {
  if (!j.is_object()) throw ConfigError("hyper must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    try {
      if (k == "inner_lr") h.inner_lr = v.get<double>();
      else if (k == "outer_lr") h.outer_lr = v.get<double>();
      else if (k == "w_lr") h.w_lr = v.get<double>();
      else if (k == "inner_steps") h.inner_steps = v.get<int>();
      else if (k == "inner_temp") h.inner_temp = v.get<double>();
      else if (k == "outer_temp") h.outer_temp = v.get<double>();
      else if (k == "prior_sd") h.prior_sd = v.get<double>();
      else if (k == "prior_scaling") h.prior_scaling = v.get<double>();
      else if (k == "init_log_std") h.init_log_std = v.get<double>();
      else if (k == "gamma_w") h.gamma_w = v.get<double>();
      else if (k == "adapt_scale") h.adapt_scale = v.get<double>();
      else if (k == "w_cap") h.w_cap = v.get<double>();
      else if (k == "w_grad_clip") h.w_grad_clip = v.get<double>();
      else if (k == "mc_samples") h.mc_samples = v.get<int>();
      else if (k == "tasks_per_batch") h.tasks_per_batch = v.get<int>();
      else if (k == "samples_per_batch") h.samples_per_batch = v.get<int>();
      else if (k == "test_inner_steps") h.test_inner_steps = v.get<int>();
      else if (k == "hyperprior_sd") h.hyperprior_sd = v.get<double>();
      else if (k == "freeze_w") h.freeze_w = v.get<bool>();
      else if (k == "outer_gradient") {
        const auto s = v.get<std::string>();
        if (s == "first_order") h.outer_gradient = OuterGradient::first_order;
        else if (s == "unrolled") h.outer_gradient = OuterGradient::unrolled;
        else throw ConfigError("hyper.outer_gradient must be first_order or unrolled");
      } else {
        throw ConfigError("unknown hyperparameter: " + k);
      }
    } catch (const json::exception& e) {
      throw ConfigError("bad value for hyper." + k + ": " + e.what());
    }
  }
  return h;
}

MetaState init_meta_state(const PredictorSpec& predictor, const HyperParams& hyper, int embed_dim,
                          std::uint64_t seed) {
  predictor.validate();
  hyper.validate();
  if (embed_dim < 1) throw ConfigError("embedding dimension must be positive");
  MetaState s;
  s.predictor = predictor;
  s.hyper = hyper;
  s.seed = seed;
  const int p = predictor.param_dim();
  s.lambda.mean = Vector::Zero(p);
  if (predictor.arch == PredictorSpec::Arch::mlp) {
    // Symmetric zero init would keep all hidden units identical.
    Rng rng(seed, {"meta_init"});
    for (int k = 0; k < p; ++k) s.lambda.mean[k] = rng.normal(0.0, 0.1);
  }
  s.lambda.log_std = Vector::Constant(p, std::log(hyper.prior_sd));
  s.w_emb = Matrix::Zero(p, embed_dim);
  s.adam_mean = Adam(hyper.outer_lr);
  s.adam_log_std = Adam(hyper.outer_lr);
  s.adam_w = Adam(hyper.w_lr);
  return s;
}

json checkpoint_to_json(const MetaState& s) {
  return json{{"hyper", hyper_to_json(s.hyper)},
              {"predictor", predictor_to_json(s.predictor)},
              {"lambda", gaussian_to_json(s.lambda)},
              {"W_emb", matrix_to_json(s.w_emb)},
              {"step_count", s.step_count},
              {"seed", s.seed}};
}

MetaState checkpoint_from_json(const json& j) {
  try {
    const HyperParams h = hyper_from_json(j.at("hyper"));
    const PredictorSpec pred = predictor_from_json(j.at("predictor"));
    Matrix w = matrix_from_json(j.at("W_emb"));
    MetaState s = init_meta_state(pred, h, static_cast<int>(w.cols()), j.at("seed").get<std::uint64_t>());
    s.lambda = gaussian_from_json(j.at("lambda"));
    if (s.lambda.dim() != pred.param_dim() || w.rows() != pred.param_dim())
      throw ConfigError("checkpoint shapes do not match the predictor");
    s.lambda.validate();
    s.w_emb = std::move(w);
    s.step_count = j.at("step_count").get<int>();
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
}

Vector prior_displacement(const MetaState& state, const TaskEmbedding& z) {
  if (z.dim() != state.w_emb.cols()) throw DomainError("embedding dimension does not match W_emb");
  Vector d = state.w_emb * z.z;
  const double cap = state.hyper.adapt_scale * std::max(state.lambda.mean.norm(), 1.0);
  const double n = d.norm();
  if (n > cap) d *= cap / n;
  return d;
}

DiagGaussian prior_for_task(const MetaState& state, const TaskEmbedding& z) {
  return DiagGaussian::isotropic(state.lambda.mean + prior_displacement(state, z), state.hyper.prior_sd);
}

TaskPosterior inner_adapt(const MetaState& state, const TaskEmbedding& z, const Matrix& x, const Vector& y,
                          Rng& rng, const AdaptOptions& options, const std::string& task_id) {
  if (x.rows() < 1) throw DomainError("support set is empty");
  const HyperParams& h = state.hyper;
  const int steps = options.steps < 0 ? h.inner_steps : options.steps;
  const DiagGaussian prior = prior_for_task(state, z);
  TaskPosterior out;
  out.prior_mean_used = prior.mean;
  out.task_id = task_id;
  out.z_used = z;
  out.psi.mean = prior.mean;
  out.psi.log_std = Vector::Constant(prior.dim(), h.init_log_std);

  const bool mini = options.minibatch > 0 && options.minibatch < x.rows();
  const std::vector<Eigen::Index> everything = mini ? all_rows(x.rows()) : std::vector<Eigen::Index>{};
  for (int k = 0; k < steps; ++k) {
    Rng step_rng = rng.child(k);
    const Matrix noise = standard_normal_matrix(step_rng, h.mc_samples, prior.dim());
    ElboEstimate e;
    if (mini) {
      Rng rows_rng = step_rng.child("rows");
      const auto rows = draw_rows(everything, static_cast<std::size_t>(options.minibatch), rows_rng);
      const Matrix xb = take_rows(x, rows);
      const Vector yb = take_rows(y, rows);
      e = elbo_grad(out.psi, prior, xb, yb, state.predictor, noise, support_kl_weight(h, xb.rows()));
    } else {
      e = elbo_grad(out.psi, prior, x, y, state.predictor, noise, support_kl_weight(h, x.rows()));
    }
    if (!std::isfinite(e.value) || !all_finite(e.grad_mean) || !all_finite(e.grad_log_std)) {
      throw NumericalError(fmt("inner adaptation diverged: lr=%g step=%g grad_norm=%g", h.inner_lr,
                               static_cast<double>(k), e.grad_mean.norm()));
    }
    if (options.loss_trace) options.loss_trace->push_back(e.value);
    out.psi.mean -= h.inner_lr * e.grad_mean;
    out.psi.log_std -= h.inner_lr * e.grad_log_std;
  }
  return out;
}

TaskSplit make_split(const TaskDataset& task, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test fraction must lie in (0, 1)");
  const Eigen::Index n = task.rows();
  const auto n_test = static_cast<Eigen::Index>(std::llround(test_fraction * static_cast<double>(n)));
  if (n_test < 1 || n_test >= n) throw DomainError("split would leave an empty side for task " + task.task_id);
  Rng rng(seed, {"split", task.task_id});
  std::vector<Eigen::Index> rows = all_rows(n);
  std::shuffle(rows.begin(), rows.end(), rng);
  TaskSplit s;
  s.test.assign(rows.begin(), rows.begin() + n_test);
  s.train.assign(rows.begin() + n_test, rows.end());
  std::sort(s.test.begin(), s.test.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

Matrix take_rows(const Matrix& x, const std::vector<Eigen::Index>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  return out;
}

Vector take_rows(const Vector& y, const std::vector<Eigen::Index>& rows) {
  Vector out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out[static_cast<Eigen::Index>(i)] = y[rows[i]];
  return out;
}

TaskNoise draw_task_noise(const MetaState& state, const MetaTask& task, Rng& rng) {
  const HyperParams& h = state.hyper;
  if (task.pool.size() < 2) throw DomainError("task pool needs at least two rows");
  Rng rows_rng = rng.child("rows");
  auto rows = draw_rows(task.pool, static_cast<std::size_t>(h.samples_per_batch), rows_rng);
  const std::size_t half = rows.size() / 2;
  TaskNoise n;
  n.support.assign(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(half));
  n.query.assign(rows.begin() + static_cast<std::ptrdiff_t>(half), rows.end());
  const Eigen::Index p = state.predictor.param_dim();
  Rng inner_rng = rng.child("inner");
  for (int k = 0; k < h.inner_steps; ++k) n.inner.push_back(standard_normal_matrix(inner_rng, h.mc_samples, p));
  Rng query_rng = rng.child("query");
  n.query_noise = standard_normal_matrix(query_rng, h.mc_samples, p);
  return n;
}

double task_outer_objective(const MetaState& state, const MetaTask& task, const TaskNoise& noise) {
  const Batch sup = gather(*task.data, noise.support);
  const Batch qry = gather(*task.data, noise.query);
  const DiagGaussian prior = prior_for_task(state, task.z);
  const InnerRun run = run_inner(state, prior, sup.x, sup.y, noise.inner);
  return query_nll(state, run.psi, qry.x, qry.y, noise.query_noise, nullptr) +
         support_kl_weight(state.hyper, sup.x.rows()) * kl_diag(run.psi, prior);
}

namespace {

OuterGrad first_order_gradient(const MetaState& state, const MetaTask& task, const TaskNoise& noise) {
  const Batch sup = gather(*task.data, noise.support);
  const Batch qry = gather(*task.data, noise.query);
  const DiagGaussian prior = prior_for_task(state, task.z);
  const InnerRun run = run_inner(state, prior, sup.x, sup.y, noise.inner);

  OuterGrad out;
  Vector g_query;
  out.query_nll = query_nll(state, run.psi, qry.x, qry.y, noise.query_noise, &g_query);
  // Path (a): psiK.mean ~ prior mean + O(lr), so d psiK / d m is taken as I.
  // Path (b): direct dependence of the surrogate KL on the prior mean.
  const double kl_w = support_kl_weight(state.hyper, sup.x.rows());
  const Vector g = g_query + kl_w * kl_diag_grad(run.psi, prior).p_mean;

  // Chain rule through m = mu + clip(W z).
  const Vector& mu = state.lambda.mean;
  const Vector d = state.w_emb * task.z.z;
  const double mu_norm = mu.norm();
  const double cap = state.hyper.adapt_scale * std::max(mu_norm, 1.0);
  const double dn = d.norm();
  out.mean = g;
  Vector g_d;
  if (dn <= cap) {
    g_d = g;
  } else {
    const Vector u = d / dn;
    const double ug = u.dot(g);
    g_d = (cap / dn) * (g - u * ug);
    if (mu_norm > 1.0) out.mean += ug * state.hyper.adapt_scale * mu / mu_norm;
  }
  out.w = g_d * task.z.z.transpose();
  return out;
}

// Central differences of the frozen-noise unrolled objective.
OuterGrad unrolled_gradient(const MetaState& state, const MetaTask& task, const TaskNoise& noise) {
  OuterGrad out;
  MetaState probe = state;
  auto f = [&] { return task_outer_objective(probe, task, noise); };
  const double base = f();
  out.query_nll = base;
  out.mean = Vector::Zero(state.lambda.dim());
  out.w = Matrix::Zero(state.w_emb.rows(), state.w_emb.cols());
  for (Eigen::Index k = 0; k < out.mean.size(); ++k) {
    const double h = 1e-5 * std::max(1.0, std::abs(state.lambda.mean[k]));
    probe.lambda.mean[k] = state.lambda.mean[k] + h;
    const double up = f();
    probe.lambda.mean[k] = state.lambda.mean[k] - h;
    const double dn = f();
    probe.lambda.mean[k] = state.lambda.mean[k];
    out.mean[k] = (up - dn) / (2.0 * h);
  }
  for (Eigen::Index r = 0; r < out.w.rows(); ++r) {
    for (Eigen::Index c = 0; c < out.w.cols(); ++c) {
      const double h = 1e-5 * std::max(1.0, std::abs(state.w_emb(r, c)));
      probe.w_emb(r, c) = state.w_emb(r, c) + h;
      const double up = f();
      probe.w_emb(r, c) = state.w_emb(r, c) - h;
      const double dn = f();
      probe.w_emb(r, c) = state.w_emb(r, c);
      out.w(r, c) = (up - dn) / (2.0 * h);
    }
  }
  return out;
}

}  // namespace

OuterGrad task_outer_gradient(const MetaState& state, const MetaTask& task, const TaskNoise& noise) {
  if (!task.data) throw DomainError("meta task has no data");
  return state.hyper.outer_gradient == OuterGradient::first_order ? first_order_gradient(state, task, noise)
                                                                  : unrolled_gradient(state, task, noise);
}

OuterStats outer_update(MetaState& state, const std::vector<MetaTask>& batch, Rng& rng) {
  if (batch.empty()) throw DomainError("outer update needs a non-empty batch");
  const HyperParams& h = state.hyper;
  const Eigen::Index p = state.lambda.dim();
  Vector g_mean = Vector::Zero(p);
  Matrix g_w = Matrix::Zero(state.w_emb.rows(), state.w_emb.cols());
  OuterStats stats;
  try {
    for (std::size_t t = 0; t < batch.size(); ++t) {
      Rng task_rng = rng.child(static_cast<std::uint64_t>(t));
      const TaskNoise noise = draw_task_noise(state, batch[t], task_rng);
      const OuterGrad g = task_outer_gradient(state, batch[t], noise);
      g_mean += g.mean;
      g_w += g.w;
      stats.loss += g.query_nll;
    }
  } catch (const NumericalError& e) {
    ++state.failed_batches;
    stats.skipped = true;
    log::warn(std::string("outer step skipped: ") + e.what());
    return stats;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  g_mean *= inv;
  g_w *= inv;
  stats.loss *= inv;

  // Hyperprior KL(q_lambda || N(0, s_h^2 I)), scaled by T2 / prior_scaling.
  const double kl_scale = h.outer_temp / h.prior_scaling;
  const DiagGaussian hyperprior = DiagGaussian::isotropic(Vector::Zero(p), h.hyperprior_sd);
  const KlGrad kg = kl_diag_grad(state.lambda, hyperprior);
  g_mean += kl_scale * kg.q_mean;
  const Vector g_log_std = kl_scale * kg.q_log_std;
  stats.loss += kl_scale * kl_diag(state.lambda, hyperprior);

  if (!h.freeze_w) {
    g_w += h.gamma_w * spectral_sq_grad(state.w_emb);
    const double sn = spectral_norm(state.w_emb);
    stats.loss += h.gamma_w * sn * sn;
  }

  if (!all_finite(g_mean) || !g_w.allFinite() || !all_finite(g_log_std)) {
    ++state.failed_batches;
    stats.skipped = true;
    log::warn("outer step skipped: non-finite gradient");
    return stats;
  }

  state.adam_mean.step(state.lambda.mean, g_mean);
  state.adam_log_std.step(state.lambda.log_std, g_log_std);
  if (!h.freeze_w) {
    const double gn = spectral_norm(g_w);
    stats.w_grad_norm = gn;
    if (gn > h.w_grad_clip) g_w *= h.w_grad_clip / gn;
    Eigen::Map<Vector> w_flat(state.w_emb.data(), state.w_emb.size());
    const Vector g_flat = Eigen::Map<const Vector>(g_w.data(), g_w.size());
    state.adam_w.step(w_flat, g_flat);
    project_spectral(state.w_emb, h.w_cap);
  }
  ++state.step_count;
  return stats;
}

namespace {

struct SourceSplit {
  TaskSplit split;
  TaskEmbedding z;
};

double validation_auroc(const MetaState& state, const std::vector<TaskDataset>& sources,
                        const std::vector<SourceSplit>& splits) {
  double sum = 0.0;
  int n = 0;
  for (std::size_t t = 0; t < sources.size(); ++t) {
    const Prediction pr = adapt_and_predict(state, splits[t].z, sources[t], splits[t].split, state.seed ^ 0x76616cULL);
    const double a = auroc(pr.scores, pr.y);
    if (std::isfinite(a)) {
      sum += a;
      ++n;
    }
  }
  return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

TrainResult meta_train(const MetaState& initial, const std::vector<TaskDataset>& sources,
                       const EmbeddingSet& embeddings, const Schedule& schedule) {
  if (sources.empty()) throw ConfigError("meta-training needs at least one source task");
  if (schedule.max_steps < 0 || schedule.eval_every < 1 || schedule.patience < 1)
    throw ConfigError("invalid training schedule");
  std::vector<SourceSplit> splits;
  std::vector<MetaTask> tasks;
  splits.reserve(sources.size());
  for (const TaskDataset& t : sources) {
    const Eigen::Index row = embeddings.index_of(t.task_id);
    if (row < 0) throw ConfigError("no embedding for source task " + t.task_id);
    if (embeddings.dim() != initial.w_emb.cols()) throw ConfigError("embedding dimension does not match the state");
    splits.push_back({make_split(t, schedule.validation_fraction, initial.seed), embeddings.at(row)});
  }
  for (std::size_t t = 0; t < sources.size(); ++t)
    tasks.push_back({&sources[t], splits[t].z, splits[t].split.train});

  TrainResult result;
  result.state = initial;
  if (schedule.max_steps == 0) {
    result.best_val_auroc = std::numeric_limits<double>::quiet_NaN();
    return result;
  }
  MetaState state = initial;
  // Best-state tracking starts after the min_steps warm-up.
  bool have_best = false;
  const auto consider = [&](int step, double val) {
    if (step < schedule.min_steps) return;
    if (!have_best || val > result.best_val_auroc) {
      have_best = true;
      result.best_val_auroc = val;
      result.best_step = step;
      result.state = state;
    }
  };
  const double val0 = validation_auroc(state, sources, splits);
  consider(0, val0);
  result.log.push_back({0, std::numeric_limits<double>::quiet_NaN(), val0, spectral_norm(state.w_emb)});

  const std::size_t per_batch = std::min(static_cast<std::size_t>(state.hyper.tasks_per_batch), tasks.size());
  std::vector<Eigen::Index> task_ids = all_rows(static_cast<Eigen::Index>(tasks.size()));
  for (int step = 1; step <= schedule.max_steps; ++step) {
    Rng rng(state.seed, {"meta_train", step});
    Rng pick = rng.child("batch");
    const auto chosen = draw_rows(task_ids, per_batch, pick);
    std::vector<MetaTask> batch;
    for (Eigen::Index k : chosen) batch.push_back(tasks[static_cast<std::size_t>(k)]);
    Rng update_rng = rng.child("update");
    const OuterStats st = outer_update(state, batch, update_rng);

    TrainLogEntry entry{step, st.loss, std::numeric_limits<double>::quiet_NaN(), spectral_norm(state.w_emb)};
    if (step % schedule.eval_every == 0) {
      entry.val_auroc = validation_auroc(state, sources, splits);
      consider(step, entry.val_auroc);
    }
    result.log.push_back(entry);
    if (have_best && step - result.best_step >= schedule.patience) break;
  }
  if (!have_best) {
    result.state = state;
    result.best_step = state.step_count;
    result.best_val_auroc = validation_auroc(state, sources, splits);
  }
  return result;
}

Prediction adapt_and_predict(const MetaState& state, const TaskEmbedding& z, const TaskDataset& target,
                             const TaskSplit& split, std::uint64_t seed) {
  if (split.train.empty() || split.test.empty()) throw DomainError("adaptation and test splits must be non-empty");
  Rng rng(seed, {"adapt", target.task_id});
  const Matrix x = take_rows(target.x, split.train);
  const Vector y = take_rows(target.y, split.train);
  Prediction out;
  Rng inner = rng.child("inner");
  out.posterior = inner_adapt(state, z, x, y, inner, AdaptOptions{state.hyper.adapt_steps(), 0, nullptr},
                              target.task_id);
  out.rows = split.test;
  out.y = take_rows(target.y, split.test);
  Rng pred = rng.child("predict");
  out.scores = predictive_scores(state.predictor, out.posterior.psi, take_rows(target.x, split.test),
                                 state.hyper.mc_samples, pred);
  return out;
}

std::string scores_to_csv(const std::string& task_id, const Prediction& p) {
  std::string out = "task_id,row_index,y_true,score\n";
  char buf[128];
  for (std::size_t i = 0; i < p.rows.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    std::snprintf(buf, sizeof buf, ",%lld,%d,%.17g\n", static_cast<long long>(p.rows[i]),
                  static_cast<int>(p.y[k]), p.scores[k]);
    out += task_id;
    out += buf;
  }
  return out;
}

Prediction train_bnn_baseline(const PredictorSpec& predictor, const TaskDataset& target, const TaskSplit& split,
                              const BnnHyper& hyper, std::uint64_t seed) {
  predictor.validate();
  if (hyper.steps < 0 || hyper.mc_samples < 1 || !(hyper.lr > 0.0) || !(hyper.prior_sd > 0.0))
    throw ConfigError("invalid BNN hyperparameters");
  if (split.train.empty() || split.test.empty()) throw DomainError("adaptation and test splits must be non-empty");
  const Matrix x = take_rows(target.x, split.train);
  const Vector y = take_rows(target.y, split.train);
  const int p = predictor.param_dim();
  Rng rng(seed, {"bnn", target.task_id});
  const DiagGaussian prior = DiagGaussian::isotropic(Vector::Zero(p), hyper.prior_sd);
  DiagGaussian q{Vector::Zero(p), Vector::Constant(p, hyper.init_log_std)};
  if (predictor.arch == PredictorSpec::Arch::mlp) {
    Rng init = rng.child("init");
    for (int k = 0; k < p; ++k) q.mean[k] = init.normal(0.0, 0.1);
  }
  Adam adam_m(hyper.lr), adam_s(hyper.lr);
  const bool mini = hyper.minibatch > 0 && hyper.minibatch < x.rows();
  const auto everything = all_rows(x.rows());
  for (int step = 0; step < hyper.steps; ++step) {
    Rng srng = rng.child(step);
    const Matrix noise = standard_normal_matrix(srng, hyper.mc_samples, p);
    ElboEstimate e;
    if (mini) {
      const auto rows = draw_rows(everything, static_cast<std::size_t>(hyper.minibatch), srng);
      const Matrix xb = take_rows(x, rows);
      e = elbo_grad(q, prior, xb, take_rows(y, rows), predictor, noise, hyper.temperature / xb.rows());
    } else {
      e = elbo_grad(q, prior, x, y, predictor, noise, hyper.temperature / x.rows());
    }
    if (!std::isfinite(e.value) || !all_finite(e.grad_mean))
      throw NumericalError(fmt("BNN baseline diverged: lr=%g step=%g grad_norm=%g", hyper.lr,
                               static_cast<double>(step), e.grad_mean.norm()));
    adam_m.step(q.mean, e.grad_mean);
    adam_s.step(q.log_std, e.grad_log_std);
  }
  Prediction out;
  out.posterior.psi = q;
  out.posterior.prior_mean_used = prior.mean;
  out.posterior.task_id = target.task_id;
  out.rows = split.test;
  out.y = take_rows(target.y, split.test);
  Rng pred = rng.child("predict");
  out.scores = predictive_scores(predictor, q, take_rows(target.x, split.test), hyper.mc_samples, pred);
  return out;
}

namespace {

// Gradient of the mean NLL at a point estimate.
Vector mean_nll_grad(const PredictorSpec& spec, const Vector& theta, const Matrix& x, const Vector& y) {
  const LogLik l = loglik(spec, theta, x, y);
  return -l.grad / static_cast<double>(x.rows());
}

Vector sgd_finetune(const PredictorSpec& spec, Vector theta, const Matrix& x, const Vector& y, double lr, int steps) {
  for (int k = 0; k < steps; ++k) theta -= lr * mean_nll_grad(spec, theta, x, y);
  return theta;
}

}  // namespace

MamlResult train_fomaml_baseline(const PredictorSpec& predictor, const std::vector<TaskDataset>& sources,
                                 const TaskDataset& target, const TaskSplit& split, const MamlHyper& hyper,
                                 double validation_fraction, std::uint64_t seed) {
  predictor.validate();
  if (sources.empty()) throw ConfigError("FOMAML needs source tasks");
  if (hyper.outer_steps < 0 || hyper.inner_steps < 0 || hyper.tasks_per_batch < 1 || hyper.samples_per_batch < 2)
    throw ConfigError("invalid MAML hyperparameters");
  const int p = predictor.param_dim();
  Rng init(seed, {"maml", "init"});
  Vector theta(p);
  for (int k = 0; k < p; ++k) theta[k] = init.normal(0.0, hyper.init_sd);

  std::vector<std::vector<Eigen::Index>> pools;
  for (const TaskDataset& t : sources) pools.push_back(make_split(t, validation_fraction, seed).train);
  const auto task_ids = all_rows(static_cast<Eigen::Index>(sources.size()));
  const std::size_t per_batch = std::min(static_cast<std::size_t>(hyper.tasks_per_batch), sources.size());
  Adam adam(hyper.outer_lr);
  for (int step = 1; step <= hyper.outer_steps; ++step) {
    Rng rng(seed, {"maml", step});
    const auto chosen = draw_rows(task_ids, per_batch, rng);
    Vector g = Vector::Zero(p);
    for (Eigen::Index k : chosen) {
      const TaskDataset& t = sources[static_cast<std::size_t>(k)];
      auto rows = draw_rows(pools[static_cast<std::size_t>(k)], static_cast<std::size_t>(hyper.samples_per_batch), rng);
      const std::size_t half = rows.size() / 2;
      const std::vector<Eigen::Index> sup(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(half));
      const std::vector<Eigen::Index> qry(rows.begin() + static_cast<std::ptrdiff_t>(half), rows.end());
      const Vector adapted =
          sgd_finetune(predictor, theta, take_rows(t.x, sup), take_rows(t.y, sup), hyper.inner_lr, hyper.inner_steps);
      g += mean_nll_grad(predictor, adapted, take_rows(t.x, qry), take_rows(t.y, qry));
    }
    g /= static_cast<double>(chosen.size());
    if (!all_finite(g)) throw NumericalError(fmt("FOMAML outer gradient is non-finite at step %g", step));
    adam.step(theta, g);
  }

  MamlResult out;
  out.theta = theta;
  const Vector adapted = sgd_finetune(predictor, theta, take_rows(target.x, split.train),
                                      take_rows(target.y, split.train), hyper.inner_lr, hyper.inner_steps);
  const Matrix xt = take_rows(target.x, split.test);
  out.prediction.posterior.psi = DiagGaussian{adapted, Vector::Constant(p, kMinLogStd)};
  out.prediction.posterior.prior_mean_used = theta;
  out.prediction.posterior.task_id = target.task_id;
  out.prediction.rows = split.test;
  out.prediction.y = take_rows(target.y, split.test);
  out.prediction.scores.resize(xt.rows());
  for (Eigen::Index i = 0; i < xt.rows(); ++i)
    out.prediction.scores[i] = sigmoid(clamp_logit(predictor_logit(predictor, adapted, xt.row(i).data())));
  return out;
}

double spectral_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  return svd.singularValues()(0);
}

}  // namespace metacausal
