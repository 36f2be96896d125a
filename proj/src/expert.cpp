#include "metacausal/expert.hpp"

#include <cmath>
#include <set>

#include "metacausal/kernels.hpp"
#include "metacausal/logging.hpp"

namespace metacausal {

namespace {

int row_of(const EmbeddingSet& sources, const std::string& id) {
  const Eigen::Index r = sources.index_of(id);
  if (r < 0) throw DomainError("unknown source id: " + id);
  return static_cast<int>(r);
}

// Unit vector (z - a)/||z - a||, zero at z = a.
Vector unit_from(const Vector& z, const Eigen::Ref<const Vector>& a) {
  Vector v = z - a;
  const double n = v.norm();
  if (n > 0.0) v /= n;
  else v.setZero();
  return v;
}

struct IndexedComparison {
  int i, j, sign;  // sign = +1 for c = 1, -1 for c = 0
};

std::vector<IndexedComparison> index_history(const std::vector<Comparison>& history, const EmbeddingSet& sources) {
  std::vector<IndexedComparison> out;
  out.reserve(history.size());
  for (const Comparison& c : history)
    out.push_back({row_of(sources, c.query.i), row_of(sources, c.query.j), c.c == 1 ? 1 : -1});
  return out;
}

// Runs the SVI loop; returns false when a non-finite value shows up.
bool run_svi(DiagGaussian& q, const std::vector<Comparison>& history, const EmbeddingSet& sources, double tau,
             const SviSettings& svi, Rng rng) {
  Adam adam_m(svi.lr), adam_s(svi.lr);
  for (int step = 0; step < svi.steps; ++step) {
    Rng srng = rng.child(step);
    const Matrix noise = standard_normal_matrix(srng, svi.elbo_mc, q.dim());
    const ProbitElbo e = probit_elbo(q, history, sources, tau, noise);
    if (!std::isfinite(e.value) || !e.grad_mean.allFinite() || !e.grad_log_std.allFinite()) return false;
    adam_m.step(q.mean, -e.grad_mean);
    adam_s.step(q.log_std, -e.grad_log_std);
    if (!q.mean.allFinite() || !q.log_std.allFinite()) return false;
  }
  return true;
}

}  // namespace

std::string to_string(Acquisition a) { return a == Acquisition::bald ? "bald" : "random"; }

Acquisition parse_acquisition(const std::string& s) {
  if (s == "bald") return Acquisition::bald;
  if (s == "random") return Acquisition::random;
  throw ConfigError("acquisition must be bald or random, got " + s);
}

void ExpertSession::validate() const {
  sources.validate();
  if (sources.size() < 2) throw ConfigError("an expert session needs at least two source tasks");
  if (budget < 0) throw ConfigError("budget must be non-negative");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (svi.steps < 0 || svi.elbo_mc < 1 || !(svi.lr > 0.0)) throw ConfigError("invalid SVI settings");
  if (bald_mc < 1) throw ConfigError("bald_mc must be at least 1");
  if (posterior.dim() != sources.dim()) throw ConfigError("posterior dimension does not match the sources");
  if (static_cast<int>(history.size()) > budget) throw ConfigError("history longer than the budget");
}

ExpertSession make_session(EmbeddingSet sources, int budget, Acquisition acquisition, std::uint64_t seed,
                           double tau) {
  ExpertSession s;
  s.posterior = DiagGaussian::standard(sources.dim());
  s.sources = std::move(sources);
  s.budget = budget;
  s.acquisition = acquisition;
  s.rng_seed = seed;
  s.tau = tau;
  s.validate();
  return s;
}

double delta(int i, int j, const Vector& z, const EmbeddingSet& sources) {
  if (z.size() != sources.dim()) throw DomainError("embedding dimension mismatch");
  return (z - sources.z.row(j).transpose()).norm() - (z - sources.z.row(i).transpose()).norm();
}

double delta(const ExpertQuery& q, const Vector& z, const EmbeddingSet& sources) {
  return delta(row_of(sources, q.i), row_of(sources, q.j), z, sources);
}

double probit_lik(const ExpertQuery& q, const Vector& z, const EmbeddingSet& sources, double tau) {
  if (!(tau > 0.0)) throw DomainError("tau must be positive");
  return kernels::std_normal_cdf(tau * delta(q, z, sources));
}

double log_probit_lik(const ExpertQuery& q, int c, const Vector& z, const EmbeddingSet& sources, double tau) {
  if (!(tau > 0.0)) throw DomainError("tau must be positive");
  const double a = tau * delta(q, z, sources);
  return kernels::log_std_normal_cdf(c == 1 ? a : -a);
}

ProbitElbo probit_elbo(const DiagGaussian& q, const std::vector<Comparison>& history, const EmbeddingSet& sources,
                       double tau, const Matrix& noise) {
  if (noise.cols() != q.dim() || q.dim() != sources.dim()) throw DomainError("dimension mismatch in probit ELBO");
  if (noise.rows() < 1) throw DomainError("at least one Monte Carlo sample is required");
  const auto hist = index_history(history, sources);
  const Samples draws = sample_with_noise(q, noise);
  const Vector sd = q.std();
  const double inv_s = 1.0 / static_cast<double>(noise.rows());

  ProbitElbo out;
  out.grad_mean = Vector::Zero(q.dim());
  out.grad_log_std = Vector::Zero(q.dim());
  double ll = 0.0;
  for (Eigen::Index s = 0; s < noise.rows(); ++s) {
    const Vector z = draws.phi.row(s).transpose();
    Vector gz = Vector::Zero(q.dim());
    for (const IndexedComparison& c : hist) {
      const Vector ui = unit_from(z, sources.z.row(c.i).transpose());
      const Vector uj = unit_from(z, sources.z.row(c.j).transpose());
      const double d = (z - sources.z.row(c.j).transpose()).norm() - (z - sources.z.row(c.i).transpose()).norm();
      const double a = c.sign * tau * d;
      ll += kernels::log_std_normal_cdf(a);
      gz += (c.sign * tau * kernels::inverse_mills(a)) * (uj - ui);
    }
    out.grad_mean += inv_s * gz;
    out.grad_log_std += inv_s * gz.cwiseProduct(noise.row(s).transpose()).cwiseProduct(sd);
  }
  const DiagGaussian prior = DiagGaussian::standard(q.dim());
  const KlGrad kg = kl_diag_grad(q, prior);
  out.value = inv_s * ll - kl_diag(q, prior);
  out.grad_mean -= kg.q_mean;
  // Likelihood path through exp(log_std) vanishes where the clamp is active.
  for (Eigen::Index k = 0; k < q.dim(); ++k)
    if (q.log_std[k] <= kMinLogStd || q.log_std[k] >= kMaxLogStd) out.grad_log_std[k] = 0.0;
  out.grad_log_std -= kg.q_log_std;
  return out;
}

namespace {

DiagGaussian fit_posterior(const ExpertSession& session, bool& reset) {
  const auto b = static_cast<std::uint64_t>(session.history.size());
  DiagGaussian q = session.posterior;
  reset = false;
  if (run_svi(q, session.history, session.sources, session.tau, session.svi, Rng(session.rng_seed, {"svi", b})))
    return q;
  log::warn("SVI diverged; restarting from the prior and replaying the history");
  reset = true;
  q = DiagGaussian::standard(session.dim());
  if (run_svi(q, session.history, session.sources, session.tau, session.svi,
              Rng(session.rng_seed, {"svi_replay", b})))
    return q;
  throw NumericalError("SVI diverged twice on the expert posterior");
}

}  // namespace

DiagGaussian svi_update(const ExpertSession& session) {
  bool reset = false;
  return fit_posterior(session, reset);
}

void refresh_posterior(ExpertSession& session) {
  bool reset = false;
  session.posterior = fit_posterior(session, reset);
  if (reset) ++session.svi_resets;
}

std::vector<std::pair<int, int>> candidate_pairs(const ExpertSession& session, bool include_asked) {
  std::set<std::pair<int, int>> asked;
  if (!include_asked) {
    for (const Comparison& c : session.history) {
      int a = row_of(session.sources, c.query.i), b = row_of(session.sources, c.query.j);
      if (a > b) std::swap(a, b);
      asked.insert({a, b});
    }
  }
  std::vector<std::pair<int, int>> out;
  const int n = static_cast<int>(session.sources.size());
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (!asked.count({i, j})) out.push_back({i, j});
  return out;
}

std::vector<double> bald_eig(const ExpertSession& session, const std::vector<std::pair<int, int>>& pairs) {
  // Common posterior samples for every candidate in one selection step.
  Rng rng(session.rng_seed, {"bald", static_cast<std::uint64_t>(session.history.size())});
  const Samples draws = sample(session.posterior, rng, session.bald_mc);
  return kernels::bald_eig_pool(pairs, session.sources.z, draws.phi, session.tau);
}

double bald_eig(const ExpertSession& session, const ExpertQuery& q) {
  const std::vector<std::pair<int, int>> one{{row_of(session.sources, q.i), row_of(session.sources, q.j)}};
  return bald_eig(session, one).front();
}

Selection select_query(const ExpertSession& session) {
  if (session.remaining() <= 0) throw DomainError("query budget exhausted");
  auto pairs = candidate_pairs(session);
  bool repeat = false;
  if (pairs.empty()) {
    pairs = candidate_pairs(session, true);
    repeat = true;
    log::warn("candidate pool exhausted; repeating a pair");
  }
  Selection sel;
  std::pair<int, int> best = pairs.front();
  if (session.acquisition == Acquisition::bald) {
    const std::vector<double> eig = bald_eig(session, pairs);
    double best_eig = eig.front();
    for (std::size_t k = 1; k < pairs.size(); ++k) {
      if (eig[k] > best_eig) {
        best_eig = eig[k];
        best = pairs[k];
      }
    }
    sel.eig = best_eig;
  } else {
    Rng rng(session.rng_seed, {"random_query", static_cast<std::uint64_t>(session.history.size())});
    best = pairs[rng.below(pairs.size())];
    sel.eig = bald_eig(session, std::vector<std::pair<int, int>>{best}).front();
  }
  sel.query = {session.sources.ids[static_cast<std::size_t>(best.first)],
               session.sources.ids[static_cast<std::size_t>(best.second)], repeat};
  return sel;
}

int simulate_expert(const ExpertQuery& q, const Vector& z_true, const EmbeddingSet& sources, double tau_expert,
                    Rng& rng) {
  if (!(tau_expert > 0.0)) throw DomainError("tau_expert must be positive");
  return rng.uniform() < probit_lik(q, z_true, sources, tau_expert) ? 1 : 0;
}

void record_answer(ExpertSession& session, const Selection& sel, int c, double timestamp) {
  if (c != 0 && c != 1) throw DomainError("expert answer must be 0 or 1");
  if (session.remaining() <= 0) throw DomainError("query budget exhausted");
  session.history.push_back({sel.query, c, sel.eig, timestamp});
  refresh_posterior(session);
}

double rmse(const Vector& a, const Vector& b) {
  if (a.size() != b.size() || a.size() == 0) throw DomainError("rmse of mismatched vectors");
  return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()));
}

LoopResult run_loop(ExpertSession& session, const AnswerSource& answer, const std::optional<Vector>& z_true) {
  LoopResult out;
  auto snapshot = [&] {
    out.mean_trace.push_back(session.posterior.mean);
    if (z_true) out.rmse_trace.push_back(rmse(session.posterior.mean, *z_true));
  };
  snapshot();
  while (session.remaining() > 0) {
    const Selection sel = select_query(session);
    const int c = answer(sel.query, static_cast<int>(session.history.size()));
    record_answer(session, sel, c);
    snapshot();
  }
  out.z_hat = session.posterior.mean;
  return out;
}

LoopResult run_simulated_loop(ExpertSession& session, const Vector& z_true, double tau_expert) {
  const EmbeddingSet& src = session.sources;
  const std::uint64_t seed = session.rng_seed;
  return run_loop(
      session,
      [&](const ExpertQuery& q, int b) {
        Rng rng(seed, {"expert_answer", b});
        return simulate_expert(q, z_true, src, tau_expert, rng);
      },
      z_true);
}

ExpertSession replay_session(const ExpertSession& blank, const std::vector<Comparison>& history) {
  ExpertSession s = blank;
  s.history.clear();
  s.posterior = DiagGaussian::standard(s.dim());
  s.svi_resets = 0;
  for (const Comparison& c : history) {
    if (s.remaining() <= 0) throw DomainError("history longer than the budget");
    s.history.push_back(c);
    refresh_posterior(s);
  }
  return s;
}

Vector Projection2D::project(const Vector& z) const { return loadings.transpose() * (z - center); }

Projection2D pca_2d(const EmbeddingSet& sources) {
  Projection2D p;
  const Eigen::Index d = sources.dim();
  p.center = sources.z.colwise().mean().transpose();
  const Eigen::MatrixXd centered = sources.z.rowwise() - p.center.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / std::max<double>(1.0, sources.size() - 1.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  p.loadings = Matrix::Zero(d, 2);
  for (Eigen::Index k = 0; k < std::min<Eigen::Index>(2, d); ++k) {
    Vector v = eig.eigenvectors().col(d - 1 - k);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    p.loadings.col(k) = v;
  }
  p.coords = centered * p.loadings;
  return p;
}

json session_to_json(const ExpertSession& s, const std::vector<double>* rmse_trace) {
  json hist = json::array();
  for (const Comparison& c : s.history) {
    json h{{"i", c.query.i}, {"j", c.query.j}, {"c", c.c}, {"eig", c.eig_at_selection}};
    if (c.query.repeat) h["repeat"] = true;
    if (c.timestamp != 0.0) h["timestamp"] = c.timestamp;
    hist.push_back(std::move(h));
  }
  json j{{"sources", embedding_set_to_json(s.sources)},
         {"tau", s.tau},
         {"budget", s.budget},
         {"acquisition", to_string(s.acquisition)},
         {"seed", s.rng_seed},
         {"svi", {{"lr", s.svi.lr}, {"steps", s.svi.steps}, {"elbo_mc", s.svi.elbo_mc}}},
         {"bald_mc", s.bald_mc},
         {"history", std::move(hist)},
         {"posterior", gaussian_to_json(s.posterior)}};
  if (rmse_trace) j["rmse_trace"] = *rmse_trace;
  return j;
}

ExpertSession session_from_json(const json& j) {
  try {
    ExpertSession s;
    s.sources = embedding_set_from_json(j.at("sources"));
    s.tau = j.at("tau").get<double>();
    s.budget = j.at("budget").get<int>();
    s.acquisition = parse_acquisition(j.at("acquisition").get<std::string>());
    s.rng_seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("svi")) {
      const json& v = j["svi"];
      s.svi = {v.at("lr").get<double>(), v.at("steps").get<int>(), v.at("elbo_mc").get<int>()};
    }
    s.bald_mc = j.value("bald_mc", 200);
    for (const json& h : j.at("history")) {
      Comparison c;
      c.query = {h.at("i").get<std::string>(), h.at("j").get<std::string>(), h.value("repeat", false)};
      c.c = h.at("c").get<int>();
      c.eig_at_selection = h.value("eig", 0.0);
      c.timestamp = h.value("timestamp", 0.0);
      s.history.push_back(c);
    }
    s.posterior = j.contains("posterior") ? gaussian_from_json(j["posterior"]) : DiagGaussian::standard(s.sources.dim());
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed session: ") + e.what());
  }
}

}  // namespace metacausal
