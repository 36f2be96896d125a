#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metacausal/bayes_core.hpp"
#include "metacausal/embedding.hpp"
#include "metacausal/taskgen.hpp"

namespace metacausal {

enum class OuterGradient { first_order, unrolled };

struct HyperParams {
  double inner_lr = 1e-4;
  double outer_lr = 1e-3;
  double w_lr = 3e-4;
  int inner_steps = 4;
  double inner_temp = 5e-4;
  double outer_temp = 5e-4;
  double prior_sd = 0.05;
  double prior_scaling = 1e4;
  double init_log_std = -3.0;
  double gamma_w = 0.1;
  double adapt_scale = 0.12;
  double w_cap = 0.5;
  double w_grad_clip = 1.0;
  int mc_samples = 10;
  int tasks_per_batch = 4;
  int samples_per_batch = 100;
  // Inner steps used at meta-test time; < 0 means inner_steps.
  int test_inner_steps = -1;
  // Std of the hyperprior p(theta) = N(0, hyperprior_sd^2 I).
  double hyperprior_sd = 1.0;
  OuterGradient outer_gradient = OuterGradient::first_order;
  // Keep W_emb at zero: the global-prior (HBM) model.
  bool freeze_w = false;

  int adapt_steps() const { return test_inner_steps < 0 ? inner_steps : test_inner_steps; }
  void validate() const;
};

json hyper_to_json(const HyperParams& h);
// Applies the keys present in j on top of base.
HyperParams hyper_from_json(const json& j, HyperParams base = {});

struct MetaState {
  DiagGaussian lambda;  // q(theta)
  Matrix w_emb;         // p x d
  HyperParams hyper;
  PredictorSpec predictor;
  int step_count = 0;
  std::uint64_t seed = 0;
  int failed_batches = 0;

  Adam adam_mean;
  Adam adam_log_std;
  Adam adam_w;
};

MetaState init_meta_state(const PredictorSpec& predictor, const HyperParams& hyper, int embed_dim,
                          std::uint64_t seed);

json checkpoint_to_json(const MetaState& state);
MetaState checkpoint_from_json(const json& j);

// Prior mean displacement W z, rescaled so that its norm is at most
// adapt_scale * max(||mu_lambda||, 1).
Vector prior_displacement(const MetaState& state, const TaskEmbedding& z);
DiagGaussian prior_for_task(const MetaState& state, const TaskEmbedding& z);

struct TaskPosterior {
  DiagGaussian psi;
  Vector prior_mean_used;
  std::string task_id;
  TaskEmbedding z_used;
};

struct AdaptOptions {
  int steps = -1;      // < 0: hyper.inner_steps
  int minibatch = 0;   // 0: full batch
  std::vector<double>* loss_trace = nullptr;
};

// K SGD steps on the tempered inner objective, starting at the embedding
// conditioned prior mean with log std hyper.init_log_std.
TaskPosterior inner_adapt(const MetaState& state, const TaskEmbedding& z, const Matrix& x, const Vector& y,
                          Rng& rng, const AdaptOptions& options = {}, const std::string& task_id = {});

struct TaskSplit {
  std::vector<Eigen::Index> train;
  std::vector<Eigen::Index> test;
};

// Random split with round(test_fraction * n) test rows, keyed by (seed, task_id).
TaskSplit make_split(const TaskDataset& task, double test_fraction, std::uint64_t seed);
Matrix take_rows(const Matrix& x, const std::vector<Eigen::Index>& rows);
Vector take_rows(const Vector& y, const std::vector<Eigen::Index>& rows);

struct MetaTask {
  const TaskDataset* data = nullptr;
  TaskEmbedding z;
  std::vector<Eigen::Index> pool;  // rows available for support/query sampling
};

// Frozen noise for one task in one outer step (common random numbers).
struct TaskNoise {
  std::vector<Eigen::Index> support;
  std::vector<Eigen::Index> query;
  std::vector<Matrix> inner;  // one S x p matrix per inner step
  Matrix query_noise;         // S x p
};

TaskNoise draw_task_noise(const MetaState& state, const MetaTask& task, Rng& rng);

// Per-task outer objective: query NLL under q_psiK plus the surrogate
// kl_weight * KL(q_psiK || prior), with psiK obtained by unrolling the inner
// loop under the given noise.
double task_outer_objective(const MetaState& state, const MetaTask& task, const TaskNoise& noise);

struct OuterGrad {
  Vector mean;  // d/d mu_lambda
  Matrix w;     // d/d W_emb
  double query_nll = 0.0;
};

// Gradient of task_outer_objective under hyper.outer_gradient.
OuterGrad task_outer_gradient(const MetaState& state, const MetaTask& task, const TaskNoise& noise);

struct OuterStats {
  double loss = 0.0;
  double w_grad_norm = 0.0;
  bool skipped = false;
};

OuterStats outer_update(MetaState& state, const std::vector<MetaTask>& batch, Rng& rng);

struct Schedule {
  int max_steps = 1000;
  int eval_every = 5;
  int patience = 20;  // in outer steps
  int min_steps = 0;  // warm-up: no best-state tracking or stopping before this step
  double validation_fraction = 0.3;
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
  double val_auroc = 0.0;  // NaN when not evaluated at this step
  double w_norm = 0.0;
};

struct TrainResult {
  MetaState state;  // best-validation state
  std::vector<TrainLogEntry> log;
  int best_step = 0;
  double best_val_auroc = 0.0;
};

TrainResult meta_train(const MetaState& initial, const std::vector<TaskDataset>& sources,
                       const EmbeddingSet& embeddings, const Schedule& schedule);

struct Prediction {
  TaskPosterior posterior;
  std::vector<Eigen::Index> rows;  // test rows of the target dataset
  Vector y;
  Vector scores;
};

Prediction adapt_and_predict(const MetaState& state, const TaskEmbedding& z, const TaskDataset& target,
                             const TaskSplit& split, std::uint64_t seed);

std::string scores_to_csv(const std::string& task_id, const Prediction& p);

struct BnnHyper {
  double lr = 3e-3;
  double temperature = 0.1;
  double prior_sd = 1.0;
  double init_log_std = -1.0;
  int steps = 1000;
  int mc_samples = 10;
  int minibatch = 0;
};

// Single-task variational logistic model trained from scratch (no transfer).
Prediction train_bnn_baseline(const PredictorSpec& predictor, const TaskDataset& target, const TaskSplit& split,
                              const BnnHyper& hyper, std::uint64_t seed);

struct MamlHyper {
  double inner_lr = 1e-2;
  double outer_lr = 1e-3;
  int inner_steps = 4;
  int tasks_per_batch = 4;
  int samples_per_batch = 100;
  int outer_steps = 1000;
  double init_sd = 0.01;
};

struct MamlResult {
  Vector theta;
  Prediction prediction;
};

// First-order MAML: point-estimate initialisation, SGD fine-tuning.
MamlResult train_fomaml_baseline(const PredictorSpec& predictor, const std::vector<TaskDataset>& sources,
                                 const TaskDataset& target, const TaskSplit& split, const MamlHyper& hyper,
                                 double validation_fraction, std::uint64_t seed);

double spectral_norm(const Matrix& m);

}  // namespace metacausal
