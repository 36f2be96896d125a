#include "metacausal/elicit_service.hpp"

#include <openssl/rand.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <fstream>

#include "httplib.h"
#include "metacausal/logging.hpp"
#include "metacausal/taskgen.hpp"

namespace metacausal {

namespace fs = std::filesystem;

namespace {

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

ServiceError bad_request(const std::string& m) { return {400, "bad_request", m}; }

void refresh_status(SessionRecord& rec) {
  if (rec.status == SessionStatus::aborted) return;
  rec.status = rec.session.remaining() <= 0 ? SessionStatus::exhausted : SessionStatus::active;
}

json query_json(const SessionRecord& rec) {
  const PendingQuery& p = *rec.pending;
  return {{"query_index", p.query_index},
          {"i", p.selection.query.i},
          {"j", p.selection.query.j},
          {"eig", p.selection.eig},
          {"repeat", p.selection.query.repeat},
          {"remaining", rec.session.remaining()}};
}

bool plain_name(const std::string& s) {
  if (s.empty() || s == "." || s == "..") return false;
  for (char ch : s)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.')) return false;
  return true;
}

}  // namespace

std::string to_string(SessionStatus s) {
  switch (s) {
    case SessionStatus::active: return "active";
    case SessionStatus::exhausted: return "exhausted";
    case SessionStatus::aborted: return "aborted";
  }
  return "active";
}

SessionStore::SessionStore(fs::path data_dir, fs::path worlds_dir)
    : data_dir_(std::move(data_dir)), worlds_dir_(std::move(worlds_dir)) {
  fs::create_directories(data_dir_);
}

std::string SessionStore::new_id() const {
  unsigned char buf[12];
  if (RAND_bytes(buf, sizeof buf) != 1) throw std::runtime_error("no randomness for a session id");
  static const char* hex = "0123456789abcdef";
  std::string id;
  for (unsigned char b : buf) {
    id += hex[b >> 4];
    id += hex[b & 15];
  }
  return id;
}

std::shared_ptr<SessionStore::Entry> SessionStore::find(const std::string& id) const {
  std::shared_lock lock(mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ServiceError(404, "not_found", "unknown session: " + id);
  return it->second;
}

void SessionStore::append(const std::string& id, const json& event) const {
  std::ofstream f(data_dir_ / (id + ".jsonl"), std::ios::app | std::ios::binary);
  if (!f) throw std::runtime_error("cannot write the event log of session " + id);
  f << dump_json(event) << '\n';
  f.flush();
}

EmbeddingSet SessionStore::resolve_sources(const json& body) const {
  if (body.contains("sources")) {
    try {
      return embedding_set_from_json(body["sources"]);
    } catch (const std::exception& e) {
      throw bad_request(std::string("invalid sources: ") + e.what());
    }
  }
  if (!body.contains("world_ref")) throw bad_request("body needs sources or world_ref");
  if (!body["world_ref"].is_string()) throw bad_request("world_ref must be a string");
  std::string ref = body["world_ref"].get<std::string>();
  if (!plain_name(ref)) throw bad_request("invalid world_ref: " + ref);
  if (!ref.ends_with(".json")) ref += ".json";
  const fs::path path = worlds_dir_ / ref;
  if (worlds_dir_.empty() || !fs::is_regular_file(path)) throw bad_request("unknown world_ref: " + ref);
  try {
    const World w = world_from_json(json::parse(read_text_file(path)));
    return make_embedding_set(std::span<const TaskDataset>(w.sources), Provenance{});
  } catch (const std::exception& e) {
    throw bad_request("unreadable world " + ref + ": " + e.what());
  }
}

void SessionStore::apply(SessionRecord& rec, const json& ev) const {
  const std::string kind = ev.at("event").get<std::string>();
  if (kind == "query") {
    PendingQuery p;
    p.query_index = ev.at("query_index").get<int>();
    p.selection.query = {ev.at("i").get<std::string>(), ev.at("j").get<std::string>(), ev.value("repeat", false)};
    p.selection.eig = ev.at("eig").get<double>();
    rec.pending = p;
  } else if (kind == "answer") {
    if (!rec.pending || rec.pending->query_index != ev.at("query_index").get<int>())
      throw std::runtime_error("answer without a matching query");
    record_answer(rec.session, rec.pending->selection, ev.at("c").get<int>(), ev.value("timestamp", 0.0));
    rec.pending.reset();
    rec.mean_trace.push_back(rec.session.posterior.mean);
  } else {
    throw std::runtime_error("unknown event " + kind);
  }
  refresh_status(rec);
}

json SessionStore::create(const json& body) {
  if (!body.is_object()) throw bad_request("body must be a JSON object");
  SessionRecord rec;
  EmbeddingSet sources = resolve_sources(body);
  try {
    const int budget = body.value("budget", 20);
    const Acquisition acq = parse_acquisition(body.value("acquisition", std::string("bald")));
    const auto seed = body.value("seed", std::uint64_t{0});
    const double tau = body.value("tau", 1.0);
    rec.session = make_session(std::move(sources), budget, acq, seed, tau);
    if (body.contains("bald_mc")) rec.session.bald_mc = body["bald_mc"].get<int>();
    if (body.contains("svi")) {
      const json& v = body["svi"];
      rec.session.svi = {v.value("lr", 0.01), v.value("steps", 150), v.value("elbo_mc", 16)};
    }
    rec.session.validate();
    if (body.contains("task_metadata")) {
      rec.task_metadata = body["task_metadata"];
      if (!rec.task_metadata.is_object()) throw bad_request("task_metadata must be an object");
      if (rec.task_metadata.contains("z_true")) {
        rec.z_true = vector_from_json(rec.task_metadata["z_true"]);
        if (rec.z_true->size() != rec.session.dim()) throw bad_request("z_true has the wrong dimension");
      }
    }
  } catch (const ServiceError&) {
    throw;
  } catch (const std::exception& e) {
    throw bad_request(e.what());
  }
  rec.session_id = new_id();
  rec.created_at = now_seconds();
  rec.mean_trace.push_back(rec.session.posterior.mean);
  refresh_status(rec);

  json ev{{"event", "create"},
          {"session_id", rec.session_id},
          {"created_at", rec.created_at},
          {"session", session_to_json(rec.session)}};
  if (!rec.task_metadata.is_null()) ev["task_metadata"] = rec.task_metadata;
  append(rec.session_id, ev);

  auto entry = std::make_shared<Entry>();
  entry->rec = std::move(rec);
  const json out{{"session_id", entry->rec.session_id}, {"status", to_string(entry->rec.status)}};
  std::unique_lock lock(mu_);
  sessions_[entry->rec.session_id] = std::move(entry);
  return out;
}

int SessionStore::rebuild() {
  std::map<std::string, std::shared_ptr<Entry>> found;
  if (fs::is_directory(data_dir_)) {
    std::vector<fs::path> logs;
    for (const auto& e : fs::directory_iterator(data_dir_))
      if (e.path().extension() == ".jsonl") logs.push_back(e.path());
    std::sort(logs.begin(), logs.end());
    for (const fs::path& p : logs) {
      auto entry = std::make_shared<Entry>();
      SessionRecord& rec = entry->rec;
      std::ifstream f(p);
      std::string line;
      bool first = true;
      try {
        while (std::getline(f, line)) {
          if (line.empty()) continue;
          const json ev = json::parse(line);
          if (first) {
            if (ev.at("event") != "create") throw std::runtime_error("log does not start with create");
            rec.session_id = ev.at("session_id").get<std::string>();
            rec.created_at = ev.value("created_at", 0.0);
            rec.session = session_from_json(ev.at("session"));
            if (ev.contains("task_metadata")) {
              rec.task_metadata = ev["task_metadata"];
              if (rec.task_metadata.contains("z_true")) rec.z_true = vector_from_json(rec.task_metadata["z_true"]);
            }
            rec.mean_trace.push_back(rec.session.posterior.mean);
            refresh_status(rec);
            first = false;
          } else {
            apply(rec, ev);
          }
        }
      } catch (const std::exception& e) {
        log::warn("session log " + p.string() + " could not be replayed: " + e.what());
        if (rec.session_id.empty()) continue;
        rec.status = SessionStatus::aborted;
      }
      if (!rec.session_id.empty()) found[rec.session_id] = entry;
    }
  }
  std::unique_lock lock(mu_);
  sessions_ = std::move(found);
  return static_cast<int>(sessions_.size());
}

json SessionStore::info(const std::string& id) {
  auto e = find(id);
  std::lock_guard lock(e->mu);
  const SessionRecord& r = e->rec;
  json out{{"session_id", r.session_id},
           {"status", to_string(r.status)},
           {"budget", r.session.budget},
           {"answered", r.session.history.size()},
           {"remaining", r.session.remaining()},
           {"acquisition", to_string(r.session.acquisition)},
           {"tau", r.session.tau},
           {"seed", r.session.rng_seed},
           {"created_at", r.created_at},
           {"source_ids", r.session.sources.ids}};
  if (r.pending) out["pending_query"] = query_json(r);
  if (!r.task_metadata.is_null()) out["task_metadata"] = r.task_metadata;
  return out;
}

json SessionStore::next_query(const std::string& id) {
  auto e = find(id);
  std::lock_guard lock(e->mu);
  SessionRecord& r = e->rec;
  if (r.status == SessionStatus::aborted) throw ServiceError(409, "aborted", "session was aborted");
  if (r.pending) return query_json(r);
  if (r.session.remaining() <= 0) throw ServiceError(409, "budget_exhausted", "query budget exhausted");
  PendingQuery p;
  p.query_index = static_cast<int>(r.session.history.size());
  p.selection = select_query(r.session);
  append(id, {{"event", "query"},
              {"query_index", p.query_index},
              {"i", p.selection.query.i},
              {"j", p.selection.query.j},
              {"eig", p.selection.eig},
              {"repeat", p.selection.query.repeat}});
  r.pending = p;
  return query_json(r);
}

json SessionStore::answer(const std::string& id, const json& body) {
  auto e = find(id);
  std::lock_guard lock(e->mu);
  SessionRecord& r = e->rec;
  if (!body.is_object() || !body.contains("query_index") || !body["query_index"].is_number_integer())
    throw bad_request("body needs an integer query_index");
  if (!body.contains("choice") || !body["choice"].is_string()) throw bad_request("body needs choice \"i\" or \"j\"");
  const std::string choice = body["choice"].get<std::string>();
  if (choice != "i" && choice != "j") throw bad_request("choice must be \"i\" or \"j\"");
  const int qi = body["query_index"].get<int>();
  if (r.status == SessionStatus::aborted) throw ServiceError(409, "aborted", "session was aborted");
  if (!r.pending || r.pending->query_index != qi)
    throw ServiceError(409, "stale_query", "query_index " + std::to_string(qi) + " is not the pinned query");

  // "i": source i judged closer.
  const json ev{{"event", "answer"}, {"query_index", qi}, {"c", choice == "i" ? 1 : 0}, {"timestamp", now_seconds()}};
  try {
    apply(r, ev);
  } catch (const NumericalError& err) {
    throw ServiceError(500, "numerical_error", err.what());
  }
  append(id, ev);
  return {{"posterior_mean", vector_to_json(r.session.posterior.mean)},
          {"posterior_std", vector_to_json(r.session.posterior.std())},
          {"remaining", r.session.remaining()},
          {"status", to_string(r.status)}};
}

json SessionStore::posterior(const std::string& id) {
  auto e = find(id);
  std::lock_guard lock(e->mu);
  const SessionRecord& r = e->rec;
  const DiagGaussian& q = r.session.posterior;
  const Projection2D proj = pca_2d(r.session.sources);
  json pts = json::array();
  for (Eigen::Index k = 0; k < proj.coords.rows(); ++k)
    pts.push_back({{"id", r.session.sources.ids[static_cast<std::size_t>(k)]},
                   {"x", proj.coords(k, 0)},
                   {"y", proj.coords(k, 1)}});
  const Vector var = q.std().array().square();
  const Matrix cov2 = proj.loadings.transpose() * var.asDiagonal() * proj.loadings;
  json out{{"mean", vector_to_json(q.mean)},
           {"std", vector_to_json(q.std())},
           {"answered", r.session.history.size()},
           {"status", to_string(r.status)},
           {"projection",
            {{"sources", std::move(pts)},
             {"mean", vector_to_json(proj.project(q.mean))},
             {"cov", matrix_to_json(cov2)}}}};
  if (r.z_true) out["rmse"] = rmse(q.mean, *r.z_true);
  return out;
}

json SessionStore::export_session(const std::string& id) {
  auto e = find(id);
  std::lock_guard lock(e->mu);
  const SessionRecord& r = e->rec;
  std::vector<double> trace;
  if (r.z_true)
    for (const Vector& m : r.mean_trace) trace.push_back(rmse(m, *r.z_true));
  json out = session_to_json(r.session, r.z_true ? &trace : nullptr);
  out["session_id"] = r.session_id;
  out["status"] = to_string(r.status);
  out["created_at"] = r.created_at;
  if (!r.task_metadata.is_null()) out["task_metadata"] = r.task_metadata;
  return out;
}

std::vector<std::string> SessionStore::ids() const {
  std::shared_lock lock(mu_);
  std::vector<std::string> out;
  for (const auto& [k, v] : sessions_) out.push_back(k);
  return out;
}

int SessionStore::pending_count(const std::string& id) {
  auto e = find(id);
  std::lock_guard lock(e->mu);
  return e->rec.pending ? 1 : 0;
}

struct ElicitServer::Impl {
  ServiceOptions opt;
  SessionStore store;
  httplib::Server svr;
  int port = -1;

  explicit Impl(ServiceOptions o) : opt(std::move(o)), store(opt.data_dir, opt.worlds_dir) {}
};

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(dump_json(body), "application/json");
}

template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const ServiceError& e) {
      send_json(res, e.status, {{"code", e.code}, {"message", e.what()}});
    } catch (const json::exception& e) {
      send_json(res, 400, {{"code", "bad_request"}, {"message", e.what()}});
    } catch (const ConfigError& e) {
      send_json(res, 400, {{"code", "bad_request"}, {"message", e.what()}});
    } catch (const DomainError& e) {
      send_json(res, 400, {{"code", "bad_request"}, {"message", e.what()}});
    } catch (const std::exception& e) {
      send_json(res, 500, {{"code", "internal"}, {"message", e.what()}});
    }
  };
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) throw bad_request("empty body");
  return json::parse(req.body);
}

}  // namespace

ElicitServer::ElicitServer(ServiceOptions options) : impl_(std::make_unique<Impl>(std::move(options))) {
  Impl& m = *impl_;
  const int n = m.store.rebuild();
  if (n > 0) log::info("restored " + std::to_string(n) + " sessions");
  SessionStore& st = m.store;
  httplib::Server& s = m.svr;

  s.new_task_queue = [threads = m.opt.threads] { return new httplib::ThreadPool(static_cast<size_t>(threads)); };
  s.set_default_headers({{"Access-Control-Allow-Origin", m.opt.cors_origin},
                         {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                         {"Access-Control-Allow-Headers", "Content-Type"}});
  s.Options(R"(/api/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  const std::string sid = R"(/api/v1/sessions/([A-Za-z0-9_-]+))";
  s.Post("/api/v1/sessions", guarded([&st](const httplib::Request& req, httplib::Response& res) {
           send_json(res, 201, st.create(parse_body(req)));
         }));
  s.Get(sid, guarded([&st](const httplib::Request& req, httplib::Response& res) {
          send_json(res, 200, st.info(req.matches[1]));
        }));
  s.Get(sid + "/query", guarded([&st](const httplib::Request& req, httplib::Response& res) {
          send_json(res, 200, st.next_query(req.matches[1]));
        }));
  s.Post(sid + "/answers", guarded([&st](const httplib::Request& req, httplib::Response& res) {
           send_json(res, 200, st.answer(req.matches[1], parse_body(req)));
         }));
  s.Get(sid + "/posterior", guarded([&st](const httplib::Request& req, httplib::Response& res) {
          send_json(res, 200, st.posterior(req.matches[1]));
        }));
  s.Get(sid + "/export", guarded([&st](const httplib::Request& req, httplib::Response& res) {
          send_json(res, 200, st.export_session(req.matches[1]));
        }));
  s.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) send_json(res, res.status, {{"code", "not_found"}, {"message", "no such route"}});
  });
}

ElicitServer::~ElicitServer() { stop(); }

int ElicitServer::bind() {
  Impl& m = *impl_;
  if (m.opt.port == 0) {
    m.port = m.svr.bind_to_any_port(m.opt.host);
  } else {
    m.port = m.svr.bind_to_port(m.opt.host, m.opt.port) ? m.opt.port : -1;
  }
  if (m.port < 0) throw ConfigError("cannot bind " + m.opt.host + ":" + std::to_string(m.opt.port));
  return m.port;
}

void ElicitServer::listen() {
  if (impl_->port < 0) bind();
  impl_->svr.listen_after_bind();
}

void ElicitServer::stop() {
  if (impl_ && impl_->svr.is_running()) impl_->svr.stop();
}

SessionStore& ElicitServer::store() { return impl_->store; }

DriveResult drive_simulated_session(const std::string& host, int port, const json& create_body,
                                    const Vector& z_true, double tau_expert) {
  httplib::Client cli(host, port);
  cli.set_read_timeout(600, 0);
  const auto call = [&](httplib::Result r, const std::string& what) {
    if (!r) throw std::runtime_error(what + ": " + httplib::to_string(r.error()));
    if (r->status >= 300) throw std::runtime_error(what + " -> " + std::to_string(r->status) + " " + r->body);
    return json::parse(r->body);
  };
  DriveResult out;
  out.session_id = call(cli.Post("/api/v1/sessions", dump_json(create_body), "application/json"), "create")
                       .at("session_id")
                       .get<std::string>();
  const std::string base = "/api/v1/sessions/" + out.session_id;
  const EmbeddingSet sources = embedding_set_from_json(create_body.at("sources"));
  const auto seed = create_body.value("seed", std::uint64_t{0});
  while (true) {
    const json info = call(cli.Get(base), "info");
    if (info.at("remaining").get<int>() <= 0) break;
    const json q = call(cli.Get(base + "/query"), "query");
    const int b = q.at("query_index").get<int>();
    Rng rng(seed, {"expert_answer", b});
    const ExpertQuery eq{q.at("i").get<std::string>(), q.at("j").get<std::string>(), q.value("repeat", false)};
    const int c = simulate_expert(eq, z_true, sources, tau_expert, rng);
    call(cli.Post(base + "/answers", dump_json(json{{"query_index", b}, {"choice", c == 1 ? "i" : "j"}}),
                  "application/json"),
         "answer");
    ++out.answered;
  }
  out.exported = call(cli.Get(base + "/export"), "export");
  return out;
}

}  // namespace metacausal
