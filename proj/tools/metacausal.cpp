// metacausal command-line driver.
#include <csignal>
#include <cstdlib>
#include <iostream>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "metacausal/elicit_service.hpp"
#include "metacausal/experiments.hpp"
#include "metacausal/logging.hpp"

using namespace metacausal;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;  // bare strings
  }
}

// "--group.name value" and "--group.name=value" flags mirror JSON paths; they
// are pulled out before CLI11 sees the arguments.
std::vector<std::pair<std::string, json>> take_overrides(std::vector<std::string>& args) {
  std::vector<std::pair<std::string, json>> out;
  std::vector<std::string> rest;
  for (std::size_t k = 0; k < args.size(); ++k) {
    const std::string& a = args[k];
    const auto eq = a.find('=');
    const std::string name = a.substr(0, eq);
    if (a.rfind("--", 0) != 0 || name.find('.') == std::string::npos) {
      rest.push_back(a);
      continue;
    }
    std::string value;
    if (eq != std::string::npos) {
      value = a.substr(eq + 1);
    } else {
      if (k + 1 >= args.size()) throw ConfigError("missing value for " + name);
      value = args[++k];
    }
    out.emplace_back(name.substr(2), parse_value(value));
  }
  args = rest;
  return out;
}

std::uint64_t default_seed() {
  if (const char* s = std::getenv("METACAUSAL_SEED")) {
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      throw ConfigError(std::string("METACAUSAL_SEED is not an unsigned integer: ") + s);
    }
  }
  return 0;
}

struct Common {
  std::string config_path;
  std::vector<std::uint64_t> seeds;
  int jobs = 0;
  std::string out;
  bool record_runtime = false;
  bool write_worlds = false;
  bool quiet = false;
  std::vector<std::string> sets;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "JSON config file (flat or grouped keys)");
  sub->add_option("--seeds", c.seeds, "seed list")->delimiter(',');
  sub->add_option("--jobs", c.jobs, "worker threads over seeds");
  sub->add_option("--out", c.out, "output directory");
  sub->add_flag("--record-runtime", c.record_runtime, "fill runtime_ms (makes CSVs non-reproducible)");
  sub->add_flag("--write-worlds", c.write_worlds, "dump each generated world as JSON");
  sub->add_flag("-q,--quiet", c.quiet, "only warnings and errors");
  sub->add_option("--set", c.sets, "KEY=VALUE override, e.g. --set budget=10 (repeatable)");
}

ExperimentConfig build_config(const Common& c, const std::vector<std::pair<std::string, json>>& overrides) {
  ExperimentConfig cfg = default_experiment_config();
  cfg.seeds = {default_seed()};
  if (!c.config_path.empty()) {
    json j;
    try {
      j = json::parse(read_text_file(c.config_path));
    } catch (const json::exception& e) {
      throw ConfigError("cannot parse " + c.config_path + ": " + e.what());
    } catch (const std::runtime_error& e) {
      throw ConfigError(e.what());
    }
    cfg = config_from_json(j, cfg);
  }
  for (const auto& [k, v] : overrides) set_config_value(cfg, k, v);
  for (const std::string& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got " + kv);
    set_config_value(cfg, kv.substr(0, eq), parse_value(kv.substr(eq + 1)));
  }
  if (!c.seeds.empty()) cfg.seeds = c.seeds;
  if (c.jobs > 0) cfg.jobs = c.jobs;
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (c.record_runtime) cfg.record_runtime = true;
  if (c.write_worlds) cfg.write_worlds = true;
  if (c.quiet) log::set_level(log::Level::warn);
  cfg.validate();
  return cfg;
}

World load_or_generate(const ExperimentConfig& cfg, const std::string& world_path) {
  if (!world_path.empty()) return world_from_json(json::parse(read_text_file(world_path)));
  return generate_experiment_world(make_world_spec(cfg, cfg.seeds.front()), cfg.n_source, cfg.source_sd, cfg.shifts);
}

void print_paths(const std::vector<std::filesystem::path>& paths) {
  for (const auto& p : paths) std::cout << p.string() << "\n";
}

ElicitServer* g_server = nullptr;
void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::vector<std::pair<std::string, json>> overrides;
  try {
    overrides = take_overrides(args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  CLI::App app{"causally-aware Bayesian meta-learning experiments"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("gen", "generate a world and write it as JSON");
  std::string gen_out = "world.json";
  add_common(gen, common);
  gen->add_option("-o,--file", gen_out, "output file");

  auto* train = app.add_subcommand("train", "meta-train on the source tasks and write a checkpoint");
  std::string train_out = "checkpoint.json", train_world;
  bool train_freeze = false;
  add_common(train, common);
  train->add_option("-o,--file", train_out, "checkpoint path");
  train->add_option("--world", train_world, "world JSON (default: generate from the first seed)");
  train->add_flag("--freeze-w", train_freeze, "global prior (W fixed at zero)");

  auto* adapt = app.add_subcommand("adapt", "adapt a checkpoint to one target and score its test rows");
  std::string adapt_ckpt, adapt_world, adapt_out = "scores.csv";
  int adapt_target = -1;
  std::vector<double> adapt_z;
  add_common(adapt, common);
  adapt->add_option("--checkpoint", adapt_ckpt, "checkpoint JSON")->required();
  adapt->add_option("--world", adapt_world, "world JSON (default: generate from the first seed)");
  adapt->add_option("--target", adapt_target, "target index (default: last)");
  adapt->add_option("--z", adapt_z, "embedding to use instead of the true one")->delimiter(',');
  adapt->add_option("-o,--file", adapt_out, "scores CSV");

  std::vector<std::pair<std::string, CLI::App*>> runners;
  for (const char* name : {"exp1", "exp2", "ablate-noise", "ablate-expert", "ablate-acq"}) {
    auto* sub = app.add_subcommand(name, std::string("run ") + name);
    add_common(sub, common);
    runners.emplace_back(name, sub);
  }

  auto* theory = app.add_subcommand("verify-theory", "KL, Lipschitz and negative-transfer checks");
  std::string theory_csv;
  int kl_cases = 5, lip_pairs = 1000;
  std::int64_t kl_samples = 1000000;
  add_common(theory, common);
  theory->add_option("--exp1-csv", theory_csv, "existing exp1 results (default: run exp1)");
  theory->add_option("--kl-cases", kl_cases);
  theory->add_option("--kl-samples", kl_samples);
  theory->add_option("--lipschitz-pairs", lip_pairs);

  auto* serve = app.add_subcommand("serve", "run the expert elicitation HTTP service");
  ServiceOptions sopt;
  std::string data_dir = sopt.data_dir.string(), worlds_dir = sopt.worlds_dir.string();
  serve->add_option("--host", sopt.host, "bind address");
  serve->add_option("--port", sopt.port, "port (0: any free port)");
  serve->add_option("--data-dir", data_dir, "session event logs");
  serve->add_option("--worlds-dir", worlds_dir, "directory searched for world_ref");
  serve->add_option("--cors-origin", sopt.cors_origin);
  serve->add_option("--threads", sopt.threads);

  auto* sim = app.add_subcommand("elicit-sim",
                                 "drive a live service with a simulated expert and compare with an offline replay");
  std::string sim_host = "127.0.0.1";
  int sim_port = 0, sim_budget = 10, sim_target = -1;
  double sim_tau = 2.0;
  std::string sim_export;
  add_common(sim, common);
  sim->add_option("--host", sim_host, "service host (with --port; default: start one in-process)");
  sim->add_option("--port", sim_port, "service port");
  sim->add_option("--budget", sim_budget);
  sim->add_option("--target", sim_target, "target index (default: last)");
  sim->add_option("--tau-expert", sim_tau);
  sim->add_option("--export", sim_export, "write the exported session here");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*serve) {
      sopt.data_dir = data_dir;
      sopt.worlds_dir = worlds_dir;
      ElicitServer server(sopt);
      const int port = server.bind();
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "listening on http://" << sopt.host << ":" << port << "/api/v1" << std::endl;
      server.listen();
      g_server = nullptr;
      return 0;
    }

    const ExperimentConfig cfg = build_config(common, overrides);

    if (*gen) {
      const World w = load_or_generate(cfg, "");
      const std::string text = dump_json(world_to_json(w));
      write_text_file(gen_out, text);
      std::cout << gen_out << " " << git_blob_hash(text) << "\n";
      return 0;
    }

    if (*train) {
      const World w = load_or_generate(cfg, train_world);
      HyperParams h = cfg.hyper;
      h.freeze_w = h.freeze_w || train_freeze;
      const EmbeddingSet emb = make_embedding_set(std::span<const TaskDataset>(w.sources), Provenance{});
      const MetaState init = init_meta_state(PredictorSpec::linear(cfg.world.feature_dim), h,
                                             static_cast<int>(emb.dim()), cfg.seeds.front());
      const TrainResult r = meta_train(init, w.sources, emb, cfg.schedule);
      write_text_file(train_out, dump_json(checkpoint_to_json(r.state), 1));
      std::cout << train_out << " best_step=" << r.best_step << " val_auroc=" << r.best_val_auroc
                << " failed_batches=" << r.state.failed_batches << "\n";
      return 0;
    }

    if (*adapt) {
      const World w = load_or_generate(cfg, adapt_world);
      const MetaState state = checkpoint_from_json(json::parse(read_text_file(adapt_ckpt)));
      const int t = adapt_target < 0 ? static_cast<int>(w.targets.size()) - 1 : adapt_target;
      if (t < 0 || t >= static_cast<int>(w.targets.size())) throw ConfigError("target index out of range");
      const TaskDataset& target = w.targets[static_cast<std::size_t>(t)];
      TaskEmbedding z = target.embedding_true;
      if (!adapt_z.empty()) z.z = Eigen::Map<const Vector>(adapt_z.data(), static_cast<Eigen::Index>(adapt_z.size()));
      const TaskSplit split = make_split(target, cfg.test_fraction, cfg.seeds.front());
      const Prediction p = adapt_and_predict(state, z, target, split, cfg.seeds.front());
      write_text_file(adapt_out, scores_to_csv(target.task_id, p));
      std::cout << adapt_out << " auroc=" << auroc(p.scores, p.y) << " logloss=" << log_loss(p.scores, p.y) << "\n";
      return 0;
    }

    for (const auto& [name, sub] : runners) {
      if (!*sub) continue;
      ExperimentOutput out;
      if (name == "exp1") out = run_exp1(cfg);
      else if (name == "exp2") out = run_exp2(cfg);
      else if (name == "ablate-noise") out = run_ablate_noise(cfg);
      else if (name == "ablate-expert") out = run_ablate_expert(cfg);
      else out = run_ablate_acq(cfg);
      print_paths(write_outputs(cfg, out));
      return 0;
    }

    if (*theory) {
      std::vector<ResultRow> rows;
      if (!theory_csv.empty()) {
        rows = results_from_csv(read_text_file(theory_csv));
      } else {
        const ExperimentOutput e1 = run_exp1(cfg);
        print_paths(write_outputs(cfg, e1));
        rows = e1.rows;
      }
      const TheoryReport rep = verify_theory(cfg, rows, kl_cases, kl_samples, lip_pairs);
      const auto path = std::filesystem::path(cfg.out_dir) / "theory.json";
      write_text_file(path, dump_json(theory_report_to_json(rep), 1));
      std::cout << path.string() << "\n";
      double worst_kl = 0.0;
      for (const auto& k : rep.kl_cases) worst_kl = std::max(worst_kl, k.rel_error);
      std::cout << "kl max relative error " << worst_kl << "\n"
                << "lipschitz " << rep.lipschitz_holds << "/" << rep.lipschitz_pairs << " (L=" << rep.lipschitz_constant
                << ")\n"
                << "nt mitigation: " << rep.nt.message << (rep.nt.violation ? " VIOLATION" : "") << "\n";
      return 0;
    }

    if (*sim) {
      const World w = load_or_generate(cfg, "");
      const int t = sim_target < 0 ? static_cast<int>(w.targets.size()) - 1 : sim_target;
      if (t < 0 || t >= static_cast<int>(w.targets.size())) throw ConfigError("target index out of range");
      const Vector z_true = w.targets[static_cast<std::size_t>(t)].embedding_true.z;
      const EmbeddingSet sources = make_embedding_set(std::span<const TaskDataset>(w.sources), Provenance{});
      const json body{{"sources", embedding_set_to_json(sources)},
                      {"budget", sim_budget},
                      {"acquisition", cfg.acquisition},
                      {"seed", cfg.seeds.front()},
                      {"tau", 1.0},
                      {"task_metadata", {{"z_true", vector_to_json(z_true)}}}};
      std::unique_ptr<ElicitServer> local;
      std::thread th;
      int port = sim_port;
      if (port == 0) {
        ServiceOptions o;
        o.port = 0;
        o.data_dir = std::filesystem::path(cfg.out_dir) / "sessions";
        local = std::make_unique<ElicitServer>(o);
        port = local->bind();
        th = std::thread([&] { local->listen(); });
      }
      DriveResult r;
      try {
        r = drive_simulated_session(sim_host, port, body, z_true, sim_tau);
      } catch (...) {
        if (local) {
          local->stop();
          th.join();
        }
        throw;
      }
      if (local) {
        local->stop();
        th.join();
      }
      const ExpertSession live = session_from_json(r.exported);
      const ExpertSession offline = replay_session(live, live.history);
      const double diff = (live.posterior.mean - offline.posterior.mean).cwiseAbs().maxCoeff();
      if (!sim_export.empty()) write_text_file(sim_export, dump_json(r.exported, 1));
      std::cout << "session " << r.session_id << " answered " << r.answered << " max |mean diff| " << diff << "\n";
      return diff <= 1e-9 ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
