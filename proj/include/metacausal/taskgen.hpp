#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metacausal/json_io.hpp"
#include "metacausal/types.hpp"

namespace metacausal {

struct TaskEmbedding {
  Vector z;

  Eigen::Index dim() const { return z.size(); }
};

enum class TaskRole { source, target };

std::string to_string(TaskRole role);

// Scalar knobs of the synthetic SCM family. The random parts of the generator
// (W_gen, b) are drawn from these by make_generator_spec.
struct GeneratorConfig {
  int feature_dim = 10;
  int embed_dim = 4;
  std::vector<int> parents = {0, 1, 2, 3};  // zero-based feature indices
  double w_gen_sd = 0.5;
  double b_lo = 0.5;
  double b_hi = 1.0;
  double eta_sd = 0.15;
  double uy_sd = 0.6;
  double alpha_source = 0.3;
  double alpha_target_base = 0.5;
  double s_max = 4.0;
  double label_quantile = 0.7;
  Vector delta;  // empty -> ones(d)/sqrt(d)
  int samples_per_task = 500;
};

struct GeneratorSpec {
  int feature_dim = 10;
  int embed_dim = 4;
  std::vector<int> parents;
  Matrix w_gen;  // feature_dim x embed_dim, zero rows off the parent set
  Vector b;      // zero off the parent set
  double eta_sd = 0.15;
  double uy_sd = 0.6;
  double alpha_source = 0.3;
  double alpha_target_base = 0.5;
  double s_max = 4.0;
  double label_quantile = 0.7;
  Vector delta;  // unit shift direction
  int samples_per_task = 500;
  std::uint64_t seed = 0;

  // Column holding the spurious feature (the last one).
  int spurious_column() const { return feature_dim - 1; }
  bool is_parent(int j) const;
  // Order statistic used as the label threshold: ceil(label_quantile * M).
  int threshold_rank() const;
  void validate() const;
};

GeneratorSpec make_generator_spec(const GeneratorConfig& config, std::uint64_t seed);

struct TaskDataset {
  std::string task_id;
  Matrix x;  // M x feature_dim
  Vector y;  // 0/1
  Vector effects;
  TaskEmbedding embedding_true;
  double shift_s = 0.0;
  TaskRole role = TaskRole::source;
  int outcome_redraws = 0;

  Eigen::Index rows() const { return x.rows(); }
  int positives() const;
};

std::vector<TaskEmbedding> sample_source_embeddings(const GeneratorSpec& spec, int n, double sd);
TaskEmbedding make_target_embedding(const GeneratorSpec& spec, double s);

// Spurious-feature strength for a task of the given role and shift.
double spurious_alpha(const GeneratorSpec& spec, TaskRole role, double s);

// The dataset's randomness is keyed by (spec.seed, task_id), so the same id
// always reproduces the same draws.
TaskDataset generate_task(const GeneratorSpec& spec, const std::string& task_id,
                          const TaskEmbedding& z, TaskRole role, double s);

struct World {
  GeneratorSpec spec;
  double source_sd = 0.8;
  std::vector<TaskDataset> sources;
  std::vector<TaskDataset> targets;
};

std::string source_task_id(int index);
std::string target_task_id(double s);

World generate_experiment_world(const GeneratorSpec& spec, int n_source = 20, double source_sd = 0.8,
                                const std::vector<double>& shift_levels = {0.1, 1.0, 2.0, 3.0, 4.0});

json spec_to_json(const GeneratorSpec& spec);
GeneratorSpec spec_from_json(const json& j);
json world_to_json(const World& world);
World world_from_json(const json& j);

}  // namespace metacausal
