#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "metacausal/eval.hpp"
#include "metacausal/expert.hpp"
#include "metacausal/metalearn.hpp"

namespace metacausal {

struct ExperimentConfig {
  GeneratorConfig world;
  int n_source = 20;
  double source_sd = 0.8;
  std::vector<double> shifts = {0.1, 1.0, 2.0, 3.0, 4.0};
  double test_fraction = 0.3;
  double support_fraction = 1.0;  // share of the training rows used to adapt on a target

  HyperParams hyper;  // causal method; HBM reuses it with W frozen at zero
  Schedule schedule;
  BnnHyper bnn;
  MamlHyper maml;

  std::vector<std::uint64_t> seeds = {0};
  std::vector<std::string> methods = {"causal_oracle", "corr_embed", "hbm_global", "bnn_nt", "fomaml"};

  // Expert settings.
  double tau_expert = 2.0;
  int budget = 20;
  std::vector<int> budget_sweep = {0, 5, 10, 15, 20};
  double budget_sweep_shift = 4.0;
  double source_noise_sd = 0.5;  // additive noise on the learner's source embeddings
  std::string acquisition = "bald";
  SviSettings svi;
  int bald_mc = 200;

  std::vector<double> sigma_c_grid = {0.0, 0.5, 0.8};
  std::vector<double> tau_grid = {0.5, 1.0, 2.0};
  std::vector<std::string> acquisition_grid = {"bald", "random"};
  double acq_tau_expert = 1.0;

  std::string out_dir = "results";
  int jobs = 1;
  bool record_runtime = false;
  bool write_worlds = false;

  void validate() const;
};

// Synthetic preset used by the experiment runners (see README).
ExperimentConfig default_experiment_config();

// Flat override: key is a dotted path such as "hyper.inner_lr" or "seeds".
void set_config_value(ExperimentConfig& cfg, const std::string& key, const json& value);
ExperimentConfig config_from_json(const json& j, ExperimentConfig base = default_experiment_config());
json config_to_json(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

GeneratorSpec make_world_spec(const ExperimentConfig& cfg, std::uint64_t seed);

struct ResultRow {
  std::uint64_t seed = 0;
  std::string method;
  double shift_s = 0.0;
  double sigma_c = 0.0;
  double tau_expert = 0.0;  // 0: not applicable
  std::string acquisition;
  int budget = 0;
  double auroc = 0.0;
  double logloss = 0.0;
  double nt = 0.0;
  double eps_ood = 0.0;  // NaN: not applicable
  double eps_causal = 0.0;
  double eps_expert = 0.0;
  double runtime_ms = 0.0;
  std::string config_hash;
  std::string world_hash;
};

struct TraceRow {
  std::uint64_t seed = 0;
  double shift_s = 0.0;
  double tau_expert = 0.0;
  std::string acquisition;
  int query_index = 0;
  double rmse = 0.0;
  std::string config_hash;
  std::string world_hash;
};

std::string results_to_csv(std::vector<ResultRow> rows);
std::string traces_to_csv(std::vector<TraceRow> rows);
std::vector<ResultRow> results_from_csv(const std::string& text);

struct ExperimentOutput {
  std::string name;
  std::vector<ResultRow> rows;
  std::vector<TraceRow> traces;
};

ExperimentOutput run_exp1(const ExperimentConfig& cfg);
ExperimentOutput run_exp2(const ExperimentConfig& cfg);
ExperimentOutput run_ablate_noise(const ExperimentConfig& cfg);
ExperimentOutput run_ablate_expert(const ExperimentConfig& cfg);
ExperimentOutput run_ablate_acq(const ExperimentConfig& cfg);

// Writes <name>.csv, <name>_traces.csv (when present) and <name>_manifest.json
// under cfg.out_dir; returns the written paths.
std::vector<std::filesystem::path> write_outputs(const ExperimentConfig& cfg, const ExperimentOutput& out);

struct TheoryReport {
  struct KlCase {
    double closed_form = 0.0;
    double mc = 0.0;
    double mc_std_err = 0.0;
    double rel_error = 0.0;
  };
  std::vector<KlCase> kl_cases;
  int lipschitz_pairs = 0;
  int lipschitz_holds = 0;
  double lipschitz_constant = 0.0;
  NtMitigationReport nt;
};

// KL vs Monte Carlo, the Lipschitz bound on random embedding pairs, and the
// NT-mitigation check on exp1 rows (oracle vs global prior, shifts >= 2).
TheoryReport verify_theory(const ExperimentConfig& cfg, const std::vector<ResultRow>& exp1_rows,
                           int kl_cases = 5, std::int64_t kl_samples = 1000000, int lipschitz_pairs = 1000);
json theory_report_to_json(const TheoryReport& r);

}  // namespace metacausal
