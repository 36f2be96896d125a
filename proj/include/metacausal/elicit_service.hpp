#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "metacausal/expert.hpp"
#include "metacausal/json_io.hpp"

namespace metacausal {

// Error carried back to the client as {code, message} with an HTTP status.
struct ServiceError : std::runtime_error {
  int status;
  std::string code;
  ServiceError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status(status), code(std::move(code)) {}
};

enum class SessionStatus { active, exhausted, aborted };
std::string to_string(SessionStatus s);

struct PendingQuery {
  int query_index = 0;
  Selection selection;
};

struct SessionRecord {
  std::string session_id;
  ExpertSession session;
  std::optional<PendingQuery> pending;
  SessionStatus status = SessionStatus::active;
  double created_at = 0.0;
  json task_metadata;               // null when absent
  std::optional<Vector> z_true;     // from task_metadata.z_true
  std::vector<Vector> mean_trace;   // index b: after b answers
};

// Session logic without the transport. Every mutation is appended to
// <data_dir>/<session_id>.jsonl before the call returns.
class SessionStore {
 public:
  SessionStore(std::filesystem::path data_dir, std::filesystem::path worlds_dir = {});

  // Replays every event log under data_dir; returns the number of sessions.
  int rebuild();

  json create(const json& body);
  json info(const std::string& id);
  json next_query(const std::string& id);
  json answer(const std::string& id, const json& body);
  json posterior(const std::string& id);
  json export_session(const std::string& id);

  std::vector<std::string> ids() const;
  // Number of pinned queries in the session (0 or 1).
  int pending_count(const std::string& id);

 private:
  struct Entry {
    std::mutex mu;
    SessionRecord rec;
  };

  std::shared_ptr<Entry> find(const std::string& id) const;
  void append(const std::string& id, const json& event) const;
  void apply(SessionRecord& rec, const json& event) const;
  EmbeddingSet resolve_sources(const json& body) const;
  std::string new_id() const;

  std::filesystem::path data_dir_;
  std::filesystem::path worlds_dir_;
  mutable std::shared_mutex mu_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
};

struct ServiceOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0: pick a free port
  std::filesystem::path data_dir = "sessions";
  std::filesystem::path worlds_dir = "worlds";
  std::string cors_origin = "*";
  int threads = 8;
};

// HTTP front end over a SessionStore, all routes under /api/v1.
class ElicitServer {
 public:
  explicit ElicitServer(ServiceOptions options);
  ~ElicitServer();
  ElicitServer(const ElicitServer&) = delete;
  ElicitServer& operator=(const ElicitServer&) = delete;

  // Binds the socket; returns the bound port.
  int bind();
  // Blocks until stop().
  void listen();
  void stop();
  SessionStore& store();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct DriveResult {
  std::string session_id;
  json exported;
  int answered = 0;
};

// Client side: creates a session over HTTP and answers every query with the
// simulated expert (same answer streams as run_simulated_loop), then exports.
DriveResult drive_simulated_session(const std::string& host, int port, const json& create_body,
                                    const Vector& z_true, double tau_expert);

}  // namespace metacausal
