#include "metacausal/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "metacausal/logging.hpp"
#include "metacausal/rng.hpp"

namespace metacausal {

std::string to_string(TaskRole role) { return role == TaskRole::source ? "source" : "target"; }

bool GeneratorSpec::is_parent(int j) const {
  return std::find(parents.begin(), parents.end(), j) != parents.end();
}

int GeneratorSpec::threshold_rank() const {
  const double qm = label_quantile * samples_per_task;
  const double rounded = std::round(qm);
  // 0.7 * 500 is 350 up to representation error; don't let that become 351.
  if (std::abs(qm - rounded) < 1e-9 * std::max(1.0, qm)) return static_cast<int>(rounded);
  return static_cast<int>(std::ceil(qm));
}

void GeneratorSpec::validate() const {
  if (feature_dim < 2 || embed_dim < 1) throw ConfigError("feature_dim must be >= 2 and embed_dim >= 1");
  if (!(label_quantile > 0.0 && label_quantile < 1.0)) throw ConfigError("label_quantile must lie in (0, 1)");
  if (samples_per_task < 2) throw ConfigError("samples_per_task must be >= 2");
  if (!(s_max > 0.0)) throw ConfigError("s_max must be positive");
  if (eta_sd < 0.0 || uy_sd <= 0.0) throw ConfigError("noise scales must be non-negative (uy_sd positive)");
  for (int j : parents) {
    if (j < 0 || j >= feature_dim) throw ConfigError("parent index out of range");
    if (j == spurious_column()) throw ConfigError("the spurious column cannot be a parent");
  }
  if (w_gen.rows() != feature_dim || w_gen.cols() != embed_dim || b.size() != feature_dim)
    throw ConfigError("generator matrices have the wrong shape");
  if (delta.size() != embed_dim) throw ConfigError("delta must have embed_dim entries");
  if (std::abs(delta.norm() - 1.0) > 1e-12) throw ConfigError("delta must be a unit vector");
  const int k = threshold_rank();
  if (k < 1 || k >= samples_per_task) throw ConfigError("label_quantile leaves one class empty");
}

GeneratorSpec make_generator_spec(const GeneratorConfig& config, std::uint64_t seed) {
  GeneratorSpec spec;
  spec.feature_dim = config.feature_dim;
  spec.embed_dim = config.embed_dim;
  spec.parents = config.parents;
  std::sort(spec.parents.begin(), spec.parents.end());
  spec.eta_sd = config.eta_sd;
  spec.uy_sd = config.uy_sd;
  spec.alpha_source = config.alpha_source;
  spec.alpha_target_base = config.alpha_target_base;
  spec.s_max = config.s_max;
  spec.label_quantile = config.label_quantile;
  spec.samples_per_task = config.samples_per_task;
  spec.seed = seed;

  if (config.delta.size() == 0) {
    spec.delta = Vector::Ones(config.embed_dim) / std::sqrt(static_cast<double>(config.embed_dim));
  } else {
    if (config.delta.size() != config.embed_dim) throw ConfigError("delta must have embed_dim entries");
    const double n = config.delta.norm();
    if (!(n > 0.0)) throw ConfigError("delta must be non-zero");
    spec.delta = config.delta / n;
  }

  spec.w_gen = Matrix::Zero(spec.feature_dim, spec.embed_dim);
  spec.b = Vector::Zero(spec.feature_dim);
  Rng w_rng(seed, {"generator", "w_gen"});
  Rng b_rng(seed, {"generator", "b"});
  for (int j : spec.parents) {
    if (j < 0 || j >= spec.feature_dim) throw ConfigError("parent index out of range");
    for (int k = 0; k < spec.embed_dim; ++k) spec.w_gen(j, k) = w_rng.normal(0.0, config.w_gen_sd);
    spec.b[j] = b_rng.uniform(config.b_lo, config.b_hi);
  }
  spec.validate();
  return spec;
}

int TaskDataset::positives() const { return static_cast<int>(y.sum()); }

std::vector<TaskEmbedding> sample_source_embeddings(const GeneratorSpec& spec, int n, double sd) {
  if (n <= 0) throw ConfigError("number of source embeddings must be positive");
  if (!(sd > 0.0)) throw ConfigError("source embedding sd must be positive");
  std::vector<TaskEmbedding> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t) {
    Rng rng(spec.seed, {"source_embedding", t});
    Vector z(spec.embed_dim);
    for (int k = 0; k < spec.embed_dim; ++k) z[k] = rng.normal(0.0, sd);
    out.push_back({std::move(z)});
  }
  return out;
}

TaskEmbedding make_target_embedding(const GeneratorSpec& spec, double s) {
  if (!(s >= 0.0)) throw DomainError("shift magnitude must be non-negative");
  return {s * spec.delta};
}

double spurious_alpha(const GeneratorSpec& spec, TaskRole role, double s) {
  if (role == TaskRole::source) return spec.alpha_source;
  return spec.alpha_target_base * (1.0 - s / spec.s_max);
}

TaskDataset generate_task(const GeneratorSpec& spec, const std::string& task_id, const TaskEmbedding& z,
                          TaskRole role, double s) {
  if (z.dim() != spec.embed_dim) throw DomainError("embedding dimension does not match the generator");
  if (role == TaskRole::target && !(s >= 0.0 && s <= spec.s_max))
    throw DomainError("target shift must lie in [0, s_max]");

  const int m = spec.samples_per_task;
  const int f = spec.feature_dim;
  const Rng base(spec.seed, {"task", task_id});

  TaskDataset ds;
  ds.task_id = task_id;
  ds.embedding_true = z;
  ds.shift_s = role == TaskRole::source ? 0.0 : s;
  ds.role = role;

  // Task-constant causal effects.
  Rng eta_rng = base.child("effects");
  ds.effects = spec.b + spec.w_gen * z.z;
  for (int j = 0; j < f; ++j) {
    const double eta = eta_rng.normal(0.0, spec.eta_sd);
    ds.effects[j] = spec.is_parent(j) ? ds.effects[j] + eta : 0.0;
  }

  Rng x_rng = base.child("features");
  ds.x.resize(m, f);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < f; ++j) ds.x(i, j) = x_rng.normal();

  Vector signal = Vector::Zero(m);
  for (int j : spec.parents) signal += ds.x.col(j) * ds.effects[j];

  const int k = spec.threshold_rank();
  Vector latent(m);
  double tau = 0.0;
  for (int attempt = 0;; ++attempt) {
    Rng u_rng = base.child("outcome").child(attempt);
    for (int i = 0; i < m; ++i) latent[i] = signal[i] + u_rng.normal(0.0, spec.uy_sd);
    std::vector<double> sorted(latent.data(), latent.data() + m);
    std::sort(sorted.begin(), sorted.end());
    tau = sorted[static_cast<std::size_t>(k - 1)];
    if (sorted[static_cast<std::size_t>(k)] != tau) break;
    ++ds.outcome_redraws;
    log::warn("tie at the label threshold for task " + task_id + "; redrawing outcome noise");
    if (attempt > 16) throw NumericalError("repeated ties at the label threshold for task " + task_id);
  }
  ds.y.resize(m);
  for (int i = 0; i < m; ++i) ds.y[i] = latent[i] > tau ? 1.0 : 0.0;

  // Spurious feature, written after labels exist.
  const double alpha = spurious_alpha(spec, role, s);
  Rng eps_rng = base.child("spurious");
  const int sc = spec.spurious_column();
  for (int i = 0; i < m; ++i) ds.x(i, sc) = alpha * (2.0 * ds.y[i] - 1.0) + eps_rng.normal();
  return ds;
}

std::string source_task_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "source-%02d", index);
  return buf;
}

std::string target_task_id(double s) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "target-s%g", s);
  return buf;
}

World generate_experiment_world(const GeneratorSpec& spec, int n_source, double source_sd,
                                const std::vector<double>& shift_levels) {
  if (shift_levels.empty()) throw ConfigError("shift_levels must be non-empty");
  World world;
  world.spec = spec;
  world.source_sd = source_sd;
  const auto embeddings = sample_source_embeddings(spec, n_source, source_sd);
  world.sources.reserve(embeddings.size());
  for (int t = 0; t < n_source; ++t)
    world.sources.push_back(generate_task(spec, source_task_id(t), embeddings[static_cast<std::size_t>(t)],
                                          TaskRole::source, 0.0));
  for (double s : shift_levels)
    world.targets.push_back(generate_task(spec, target_task_id(s), make_target_embedding(spec, s),
                                          TaskRole::target, s));
  return world;
}

json spec_to_json(const GeneratorSpec& spec) {
  return {{"feature_dim", spec.feature_dim},
          {"embed_dim", spec.embed_dim},
          {"parents", spec.parents},
          {"w_gen", matrix_to_json(spec.w_gen)},
          {"b", vector_to_json(spec.b)},
          {"eta_sd", spec.eta_sd},
          {"uy_sd", spec.uy_sd},
          {"alpha_source", spec.alpha_source},
          {"alpha_target_base", spec.alpha_target_base},
          {"s_max", spec.s_max},
          {"label_quantile", spec.label_quantile},
          {"delta", vector_to_json(spec.delta)},
          {"samples_per_task", spec.samples_per_task},
          {"seed", spec.seed}};
}

GeneratorSpec spec_from_json(const json& j) {
  try {
    GeneratorSpec spec;
    spec.feature_dim = j.at("feature_dim").get<int>();
    spec.embed_dim = j.at("embed_dim").get<int>();
    spec.parents = j.at("parents").get<std::vector<int>>();
    spec.w_gen = matrix_from_json(j.at("w_gen"));
    spec.b = vector_from_json(j.at("b"));
    spec.eta_sd = j.at("eta_sd").get<double>();
    spec.uy_sd = j.at("uy_sd").get<double>();
    spec.alpha_source = j.at("alpha_source").get<double>();
    spec.alpha_target_base = j.value("alpha_target_base", 0.5);
    spec.s_max = j.at("s_max").get<double>();
    spec.label_quantile = j.at("label_quantile").get<double>();
    spec.delta = vector_from_json(j.at("delta"));
    spec.samples_per_task = j.at("samples_per_task").get<int>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    spec.validate();
    return spec;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed generator spec: ") + e.what());
  }
}

namespace {

json task_to_json(const TaskDataset& t) {
  json y = json::array();
  for (Eigen::Index i = 0; i < t.y.size(); ++i) y.push_back(static_cast<int>(t.y[i]));
  return {{"task_id", t.task_id},
          {"role", to_string(t.role)},
          {"z", vector_to_json(t.embedding_true.z)},
          {"s", t.shift_s},
          {"X", matrix_to_json(t.x)},
          {"y", y},
          {"e_t", vector_to_json(t.effects)}};
}

TaskDataset task_from_json(const json& j, TaskRole role) {
  TaskDataset t;
  t.task_id = j.at("task_id").get<std::string>();
  t.role = role;
  t.embedding_true = {vector_from_json(j.at("z"))};
  t.shift_s = j.at("s").get<double>();
  t.x = matrix_from_json(j.at("X"));
  t.y = vector_from_json(j.at("y"));
  t.effects = vector_from_json(j.at("e_t"));
  if (t.y.size() != t.x.rows()) throw ConfigError("task " + t.task_id + ": X and y lengths differ");
  return t;
}

}  // namespace

json world_to_json(const World& world) {
  json sources = json::array();
  for (const auto& t : world.sources) sources.push_back(task_to_json(t));
  json targets = json::array();
  for (const auto& t : world.targets) targets.push_back(task_to_json(t));
  return {{"spec", spec_to_json(world.spec)},
          {"source_sd", world.source_sd},
          {"sources", std::move(sources)},
          {"targets", std::move(targets)}};
}

World world_from_json(const json& j) {
  try {
    World w;
    w.spec = spec_from_json(j.at("spec"));
    w.source_sd = j.value("source_sd", 0.8);
    for (const auto& t : j.at("sources")) w.sources.push_back(task_from_json(t, TaskRole::source));
    for (const auto& t : j.at("targets")) w.targets.push_back(task_from_json(t, TaskRole::target));
    return w;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed world file: ") + e.what());
  }
}

}  // namespace metacausal
