#pragma once

#include <span>
#include <string>
#include <vector>

#include "metacausal/json_io.hpp"
#include "metacausal/rng.hpp"
#include "metacausal/taskgen.hpp"

namespace metacausal {

struct Provenance {
  enum class Kind { oracle, corrupted, correlation, expert };
  Kind kind = Kind::oracle;
  double sigma_c = 0.0;  // only meaningful for corrupted

  std::string to_string() const;
  static Provenance parse(const std::string& text);
};

struct EmbeddingSet {
  std::vector<std::string> ids;
  Matrix z;  // n x d, one row per task
  Provenance provenance;

  Eigen::Index size() const { return z.rows(); }
  Eigen::Index dim() const { return z.cols(); }
  TaskEmbedding at(Eigen::Index row) const { return {z.row(row).transpose()}; }
  // Row index of a task id, or -1.
  Eigen::Index index_of(const std::string& id) const;
  void validate() const;
};

EmbeddingSet make_embedding_set(std::span<const TaskDataset> tasks, Provenance provenance = {});
EmbeddingSet make_embedding_set(std::vector<std::string> ids, const std::vector<TaskEmbedding>& rows,
                                Provenance provenance);

double dist(const Vector& a, const Vector& b);
inline double dist(const TaskEmbedding& a, const TaskEmbedding& b) { return dist(a.z, b.z); }
bool eps_similar(const TaskEmbedding& a, const TaskEmbedding& b, double eps);

// Norm-preserving directional corruption: rotates z towards a random direction
// by an amount controlled by sigma_c while keeping ||z||.
TaskEmbedding corrupt(const TaskEmbedding& z, double sigma_c, Rng& rng);
EmbeddingSet corrupt(const EmbeddingSet& set, double sigma_c, std::uint64_t seed);
// Additive isotropic noise, z + N(0, sd^2 I).
EmbeddingSet add_gaussian_noise(const EmbeddingSet& set, double sd, std::uint64_t seed);

TaskEmbedding mean_source_embedding(const EmbeddingSet& set);

struct FeatureCorrelation {
  Vector c;
  std::vector<int> zero_variance_columns;
};

// Pearson correlation of every feature column with the label.
FeatureCorrelation feature_label_correlation(const TaskDataset& task);

struct CorrelationProjector {
  Matrix loadings;  // feature_dim x d, orthonormal columns
  Vector center;    // feature_dim

  TaskEmbedding project(const Vector& correlation) const;
  Vector reconstruct(const TaskEmbedding& e) const;
};

CorrelationProjector fit_correlation_projector(std::span<const TaskDataset> sources, int d);
TaskEmbedding embed_by_correlation(const CorrelationProjector& projector, const TaskDataset& task);

json embedding_set_to_json(const EmbeddingSet& set);
EmbeddingSet embedding_set_from_json(const json& j);

}  // namespace metacausal
