#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "metacausal/bayes_core.hpp"
#include "metacausal/embedding.hpp"

namespace metacausal {

struct ExpertQuery {
  std::string i;
  std::string j;
  // Set when the pair was asked before (only after the pool ran out).
  bool repeat = false;
};

struct Comparison {
  ExpertQuery query;
  int c = 0;  // 1: source i judged closer to the target
  double eig_at_selection = 0.0;
  double timestamp = 0.0;  // seconds since epoch; 0 for simulated answers
};

enum class Acquisition { bald, random };
std::string to_string(Acquisition a);
Acquisition parse_acquisition(const std::string& s);

struct SviSettings {
  double lr = 0.01;
  int steps = 150;
  int elbo_mc = 16;
};

struct ExpertSession {
  EmbeddingSet sources;
  DiagGaussian posterior;  // q(z) over R^d
  std::vector<Comparison> history;
  double tau = 1.0;
  int budget = 20;
  Acquisition acquisition = Acquisition::bald;
  SviSettings svi;
  int bald_mc = 200;
  std::uint64_t rng_seed = 0;
  int svi_resets = 0;

  Eigen::Index dim() const { return sources.dim(); }
  int remaining() const { return budget - static_cast<int>(history.size()); }
  void validate() const;
};

ExpertSession make_session(EmbeddingSet sources, int budget, Acquisition acquisition, std::uint64_t seed,
                           double tau = 1.0);

// ||z - z_j|| - ||z - z_i||; positive when i is closer.
double delta(const ExpertQuery& q, const Vector& z, const EmbeddingSet& sources);
double delta(int i, int j, const Vector& z, const EmbeddingSet& sources);
// P(c = 1 | z) = Phi(tau * delta).
double probit_lik(const ExpertQuery& q, const Vector& z, const EmbeddingSet& sources, double tau);
double log_probit_lik(const ExpertQuery& q, int c, const Vector& z, const EmbeddingSet& sources, double tau);

struct ProbitElbo {
  double value = 0.0;  // ELBO (to be maximised)
  Vector grad_mean;
  Vector grad_log_std;
};

// E_q[sum_b log p(c_b | z)] - KL(q || N(0, I)) with frozen noise (S x d).
ProbitElbo probit_elbo(const DiagGaussian& q, const std::vector<Comparison>& history, const EmbeddingSet& sources,
                       double tau, const Matrix& noise);

// Adam steps on the probit ELBO, warm-started from session.posterior.
DiagGaussian svi_update(const ExpertSession& session);
// svi_update and store the result; records a reset when the fallback fired.
void refresh_posterior(ExpertSession& session);

// Unordered pairs (i < j) by source row.
std::vector<std::pair<int, int>> candidate_pairs(const ExpertSession& session, bool include_asked = false);

double bald_eig(const ExpertSession& session, const ExpertQuery& q);
std::vector<double> bald_eig(const ExpertSession& session, const std::vector<std::pair<int, int>>& pairs);

struct Selection {
  ExpertQuery query;
  double eig = 0.0;
};

Selection select_query(const ExpertSession& session);

int simulate_expert(const ExpertQuery& q, const Vector& z_true, const EmbeddingSet& sources, double tau_expert,
                    Rng& rng);

// Appends an answer and refreshes the posterior.
void record_answer(ExpertSession& session, const Selection& sel, int c, double timestamp = 0.0);

using AnswerSource = std::function<int(const ExpertQuery&, int query_index)>;

struct LoopResult {
  Vector z_hat;
  std::vector<double> rmse_trace;  // index b: after b answers; empty without z_true
  std::vector<Vector> mean_trace;
};

double rmse(const Vector& a, const Vector& b);

LoopResult run_loop(ExpertSession& session, const AnswerSource& answer,
                    const std::optional<Vector>& z_true = std::nullopt);
// Simulated expert with its own answer stream keyed by the session seed.
LoopResult run_simulated_loop(ExpertSession& session, const Vector& z_true, double tau_expert);

// Rebuilds the posterior from an answer sequence alone.
ExpertSession replay_session(const ExpertSession& blank, const std::vector<Comparison>& history);

struct Projection2D {
  Matrix loadings;  // d x 2
  Vector center;
  Matrix coords;  // n x 2

  Vector project(const Vector& z) const;
};

Projection2D pca_2d(const EmbeddingSet& sources);

json session_to_json(const ExpertSession& s, const std::vector<double>* rmse_trace = nullptr);
ExpertSession session_from_json(const json& j);

}  // namespace metacausal
