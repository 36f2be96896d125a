#include "metacausal/embedding.hpp"

#include <cmath>
#include <cstdio>
#include <set>

#include "metacausal/logging.hpp"

namespace metacausal {

std::string Provenance::to_string() const {
  switch (kind) {
    case Kind::oracle:
      return "oracle";
    case Kind::correlation:
      return "correlation";
    case Kind::expert:
      return "expert";
    case Kind::corrupted: {
      char buf[48];
      std::snprintf(buf, sizeof buf, "corrupted(%g)", sigma_c);
      return buf;
    }
  }
  return "oracle";
}

Provenance Provenance::parse(const std::string& text) {
  if (text == "oracle") return {Kind::oracle, 0.0};
  if (text == "correlation") return {Kind::correlation, 0.0};
  if (text == "expert") return {Kind::expert, 0.0};
  if (text.rfind("corrupted(", 0) == 0 && text.back() == ')') {
    try {
      return {Kind::corrupted, std::stod(text.substr(10, text.size() - 11))};
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("unknown embedding provenance '" + text + "'");
}

Eigen::Index EmbeddingSet::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == id) return static_cast<Eigen::Index>(i);
  return -1;
}

void EmbeddingSet::validate() const {
  if (static_cast<Eigen::Index>(ids.size()) != z.rows()) throw ConfigError("embedding ids and rows differ in count");
  if (z.rows() > 0 && z.cols() < 1) throw ConfigError("embedding dimension must be positive");
  if (!z.allFinite()) throw ConfigError("embedding rows must be finite");
  std::set<std::string> seen(ids.begin(), ids.end());
  if (seen.size() != ids.size()) throw ConfigError("embedding ids must be unique");
}

EmbeddingSet make_embedding_set(std::span<const TaskDataset> tasks, Provenance provenance) {
  std::vector<std::string> ids;
  std::vector<TaskEmbedding> rows;
  for (const auto& t : tasks) {
    ids.push_back(t.task_id);
    rows.push_back(t.embedding_true);
  }
  return make_embedding_set(std::move(ids), rows, provenance);
}

EmbeddingSet make_embedding_set(std::vector<std::string> ids, const std::vector<TaskEmbedding>& rows,
                                Provenance provenance) {
  EmbeddingSet set;
  set.ids = std::move(ids);
  set.provenance = provenance;
  const Eigen::Index d = rows.empty() ? 0 : rows.front().dim();
  set.z.resize(static_cast<Eigen::Index>(rows.size()), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].dim() != d) throw DomainError("embedding rows have inconsistent dimension");
    set.z.row(static_cast<Eigen::Index>(i)) = rows[i].z.transpose();
  }
  set.validate();
  return set;
}

double dist(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw DomainError("embedding dimension mismatch");
  return (a - b).norm();
}

bool eps_similar(const TaskEmbedding& a, const TaskEmbedding& b, double eps) { return dist(a, b) <= eps; }

TaskEmbedding corrupt(const TaskEmbedding& z, double sigma_c, Rng& rng) {
  if (!(sigma_c >= 0.0)) throw DomainError("corruption level must be non-negative");
  const double norm = z.z.norm();
  if (norm == 0.0) {
    log::debug("corrupt: zero embedding returned unchanged");
    return z;
  }
  Vector d(z.dim());
  for (Eigen::Index k = 0; k < d.size(); ++k) d[k] = rng.normal();
  const Vector u = d / d.norm();
  const Vector moved = z.z + sigma_c * norm * u;
  return {norm * moved / moved.norm()};
}

EmbeddingSet corrupt(const EmbeddingSet& set, double sigma_c, std::uint64_t seed) {
  EmbeddingSet out = set;
  out.provenance = {Provenance::Kind::corrupted, sigma_c};
  for (Eigen::Index i = 0; i < set.size(); ++i) {
    Rng rng(seed, {"corrupt", set.ids[static_cast<std::size_t>(i)]});
    out.z.row(i) = corrupt(set.at(i), sigma_c, rng).z.transpose();
  }
  return out;
}

EmbeddingSet add_gaussian_noise(const EmbeddingSet& set, double sd, std::uint64_t seed) {
  if (!(sd >= 0.0)) throw DomainError("noise sd must be non-negative");
  EmbeddingSet out = set;
  out.provenance = {Provenance::Kind::corrupted, sd};
  for (Eigen::Index i = 0; i < set.size(); ++i) {
    Rng rng(seed, {"additive_noise", set.ids[static_cast<std::size_t>(i)]});
    for (Eigen::Index k = 0; k < set.dim(); ++k) out.z(i, k) += rng.normal(0.0, sd);
  }
  return out;
}

TaskEmbedding mean_source_embedding(const EmbeddingSet& set) {
  if (set.size() == 0) throw DomainError("mean of an empty embedding set");
  return {set.z.colwise().mean().transpose()};
}

FeatureCorrelation feature_label_correlation(const TaskDataset& task) {
  FeatureCorrelation out;
  const auto f = task.x.cols();
  out.c = Vector::Zero(f);
  const double n = static_cast<double>(task.rows());
  const Vector yc = task.y.array() - task.y.mean();
  const double sy = std::sqrt(yc.squaredNorm() / n);
  for (Eigen::Index j = 0; j < f; ++j) {
    const Vector xc = task.x.col(j).array() - task.x.col(j).mean();
    const double sx = std::sqrt(xc.squaredNorm() / n);
    if (sx < 1e-12 || sy < 1e-12) {
      out.zero_variance_columns.push_back(static_cast<int>(j));
      continue;
    }
    out.c[j] = xc.dot(yc) / n / (sx * sy);
  }
  if (!out.zero_variance_columns.empty())
    log::warn("task " + task.task_id + ": zero-variance column(s) in correlation embedding, set to 0");
  return out;
}

TaskEmbedding CorrelationProjector::project(const Vector& correlation) const {
  if (correlation.size() != center.size()) throw DomainError("correlation vector has the wrong length");
  return {loadings.transpose() * (correlation - center)};
}

Vector CorrelationProjector::reconstruct(const TaskEmbedding& e) const { return center + loadings * e.z; }

CorrelationProjector fit_correlation_projector(std::span<const TaskDataset> sources, int d) {
  if (d < 1) throw ConfigError("projection dimension must be positive");
  if (static_cast<int>(sources.size()) < d) throw ConfigError("need at least d source tasks to fit the projector");
  const auto f = sources.front().x.cols();
  if (d > f) throw ConfigError("projection dimension exceeds the feature dimension");
  Matrix c(static_cast<Eigen::Index>(sources.size()), f);
  for (std::size_t t = 0; t < sources.size(); ++t)
    c.row(static_cast<Eigen::Index>(t)) = feature_label_correlation(sources[t]).c.transpose();

  CorrelationProjector p;
  p.center = c.colwise().mean().transpose();
  const Matrix centered = c.rowwise() - p.center.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(c.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  p.loadings.resize(f, d);
  for (int k = 0; k < d; ++k) {
    // Eigenvalues come back ascending.
    Vector v = eig.eigenvectors().col(f - 1 - k);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;  // deterministic sign
    p.loadings.col(k) = v;
  }
  return p;
}

TaskEmbedding embed_by_correlation(const CorrelationProjector& projector, const TaskDataset& task) {
  return projector.project(feature_label_correlation(task).c);
}

json embedding_set_to_json(const EmbeddingSet& set) {
  return {{"ids", set.ids},
          {"d", set.dim()},
          {"provenance", set.provenance.to_string()},
          {"rows", matrix_to_json(set.z)}};
}

EmbeddingSet embedding_set_from_json(const json& j) {
  try {
    EmbeddingSet set;
    set.ids = j.at("ids").get<std::vector<std::string>>();
    set.provenance = Provenance::parse(j.value("provenance", std::string("oracle")));
    set.z = matrix_from_json(j.at("rows"));
    const auto d = j.at("d").get<Eigen::Index>();
    if (set.z.rows() == 0) set.z.resize(0, d);
    if (set.z.cols() != d) throw ConfigError("embedding rows do not match d");
    set.validate();
    return set;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed embedding set: ") + e.what());
  }
}

}  // namespace metacausal
