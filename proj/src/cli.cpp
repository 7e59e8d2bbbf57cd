#include "crabs/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "crabs/audit.hpp"
#include "crabs/orchestrator.hpp"
#include "crabs/serialize.hpp"
#include "json.hpp"

namespace crabs {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// --------------------------------------------------------- run artifacts

int parse_epoch_dir(const fs::path& p) {
  std::string name = p.filename().string();
  if (name.rfind("epoch_", 0) != 0) return -1;
  try {
    return std::stoi(name.substr(6));
  } catch (...) {
    return -1;
  }
}

int latest_epoch(const std::string& run_dir) {
  int best = -1;
  fs::path root = fs::path(run_dir) / "checkpoints";
  if (!fs::exists(root)) return -1;
  for (const auto& entry : fs::directory_iterator(root))
    best = std::max(best, parse_epoch_dir(entry.path()));
  return best;
}

struct RunArtifacts {
  RunConfig cfg;
  TaskSpec task;
  int epoch = -1;
  SquashedGaussianPolicy policy;
  BarrierCertificate cert;
  EnsembleDynamics ens;
};

RunArtifacts load_artifacts(const std::string& run_dir, int epoch) {
  if (!fs::exists(run_dir + "/config.json"))
    throw ConfigError("not a run directory (no config.json): " + run_dir);
  RunArtifacts art;
  art.cfg = config_from_file(run_dir + "/config.json");
  art.task = art.cfg.task_spec();
  art.epoch = epoch < 0 ? latest_epoch(run_dir) : epoch;
  if (art.epoch < 0) throw ConfigError("no checkpoints under " + run_dir);
  char tag[16];
  std::snprintf(tag, sizeof tag, "epoch_%03d", art.epoch);
  fs::path dir = fs::path(run_dir) / "checkpoints" / tag;
  if (!fs::exists(dir))
    throw ConfigError("missing checkpoint directory: " + dir.string());
  {
    ByteReader r = ByteReader::from_file((dir / "policy.bin").string());
    art.policy = policy_from_reader(r);
  }
  {
    art.cert = make_task_certificate(art.task, art.cfg.cert_hidden, 0);
    ByteReader r = ByteReader::from_file((dir / "certificate.bin").string());
    art.cert.f = net_from_reader(r);
    art.cert.s0 = r.vec();
    art.cert.refresh();
  }
  {
    ByteReader r = ByteReader::from_file((dir / "ensemble.bin").string());
    art.ens = ens_from_reader(r);
  }
  return art;
}

// Exhaustive sweep of an n-dimensional box (the 2D case is handled by the
// dedicated audit; this covers the 4D tasks at moderate resolutions).
AuditResult grid_audit_nd(const SafetyOp& op, const PolicyFn& pi,
                          const std::function<bool(const Vec&)>& unsafe_pred,
                          const Vec& lo, const Vec& hi, int res) {
  AuditResult out;
  const std::size_t dim = lo.size();
  std::vector<int> idx(dim, 0);
  Vec s(dim, 0.0), a;
  for (;;) {
    for (std::size_t d = 0; d < dim; ++d)
      s[d] = res == 1 ? 0.5 * (lo[d] + hi[d])
                      : lo[d] + (hi[d] - lo[d]) * idx[d] / double(res - 1);
    ++out.total;
    if (unsafe_pred(s)) {
      ++out.unsafe_points;
      double h = op.h->value(s);
      if (h > out.max_h_unsafe) {
        out.max_h_unsafe = h;
        out.argmax_h_unsafe = s;
      }
    } else if (op.h->value(s) >= 0.0) {
      ++out.certified;
      pi.act(s, a);
      double u = op.eval(s, a).u;
      if (u > out.max_u_certified) {
        out.max_u_certified = u;
        out.argmax_u = s;
      }
    }
    std::size_t d = 0;
    while (d < dim && ++idx[d] == res) {
      idx[d] = 0;
      ++d;
    }
    if (d == dim) break;
  }
  return out;
}

// ----------------------------------------------------- config resolution

struct TrainCli {
  std::string config_path, task = "upright", profile = "desk", out;
  std::uint64_t seed = 1;
  int epochs = 0, threads = 0;
  bool fixed_cert = false, resume = false;
  CLI::Option* o_task = nullptr;
  CLI::Option* o_profile = nullptr;
  CLI::Option* o_seed = nullptr;
  CLI::Option* o_epochs = nullptr;
  CLI::Option* o_out = nullptr;
};

void add_train_options(CLI::App* cmd, TrainCli& a) {
  cmd->add_option("--config", a.config_path,
                  "JSON config file; explicit flags override its fields")
      ->check(CLI::ExistingFile);
  a.o_task = cmd->add_option("--task", a.task, "upright | tilt | move | swing");
  a.o_profile =
      cmd->add_option("--profile", a.profile, "budget preset: desk | paper");
  a.o_seed = cmd->add_option("--seed", a.seed, "master RNG seed");
  a.o_epochs = cmd->add_option("--epochs", a.epochs, "epoch count override");
  a.o_out = cmd->add_option(
      "--out", a.out, "run directory (overrides the CRABS_OUT_DIR variable)");
  cmd->add_flag("--fixed-certificate", a.fixed_cert,
                "ablation: fixed handmade barrier, certificate never trained");
  cmd->add_option("--threads", a.threads,
                  "cap on module-internal parallelism (every stage is "
                  "single-threaded, so any cap >= 1 is honored; overrides "
                  "the CRABS_THREADS variable)")
      ->check(CLI::PositiveNumber);
}

void resolve_threads(const TrainCli& a) {
  int threads = 1;
  if (const char* env = std::getenv("CRABS_THREADS")) {
    threads = std::atoi(env);
    if (threads < 1)
      throw ConfigError("CRABS_THREADS must be a positive integer, got '" +
                        std::string(env) + "'");
  }
  if (a.threads > 0) threads = a.threads;
  (void)threads;  // validated cap; no stage runs more than one thread
}

RunConfig resolve_config(const TrainCli& a) {
  if (!a.config_path.empty() && a.o_profile->count() > 0)
    throw ConfigError(
        "--profile cannot override a config file; edit the file instead");
  RunConfig cfg = !a.config_path.empty() ? config_from_file(a.config_path)
                                         : make_profile(a.task, a.profile);
  if (a.o_task->count() > 0) {
    cfg.task = a.task;
    if (a.config_path.empty() && a.o_out->count() == 0)
      cfg.out_dir = "runs/" + a.task;
  }
  if (a.o_seed->count() > 0) cfg.seed = a.seed;
  if (a.o_epochs->count() > 0) cfg.epochs = a.epochs;
  if (a.fixed_cert) cfg.fixed_certificate = true;
  if (a.o_out->count() > 0)
    cfg.out_dir = a.out;
  else if (const char* env = std::getenv("CRABS_OUT_DIR"))
    cfg.out_dir = env;
  resolve_threads(a);
  cfg.validate();
  return cfg;
}

// ------------------------------------------------------------------ verbs

int do_train(const TrainCli& a) {
  RunConfig cfg = resolve_config(a);
  RunResult res = run(cfg, a.resume);
  json j;
  j["out_dir"] = cfg.out_dir;
  j["task"] = cfg.task;
  j["seed"] = cfg.seed;
  j["epochs_completed"] = res.reports.size();
  j["crabs_violations"] = res.crabs_violations;
  j["bootstrap_violations"] = res.bootstrap_violations;
  j["bootstrap_checkpoint"] = res.bootstrap_checkpoint;
  j["final_eval_return"] = res.final_eval_return;
  j["resumed"] = res.resumed;
  j["aborted"] = res.aborted;
  if (res.aborted) j["abort_reason"] = res.abort_reason;
  std::cout << j.dump(2) << "\n";
  return (res.aborted || res.crabs_violations != 0) ? 1 : 0;
}

int do_bootstrap(const TrainCli& a) {
  RunConfig cfg = resolve_config(a);
  cfg.epochs = 0;  // bootstrap artifacts only
  RunResult res = run(cfg, false);
  json j;
  j["out_dir"] = cfg.out_dir;
  j["task"] = cfg.task;
  j["seed"] = cfg.seed;
  j["bootstrap_checkpoint"] = res.bootstrap_checkpoint;
  j["bootstrap_violations"] = res.bootstrap_violations;
  std::cout << j.dump(2) << "\n";
  return 0;
}

int do_eval(const std::string& run_dir, int epoch, int episodes) {
  RunArtifacts art = load_artifacts(run_dir, epoch);
  double sum = 0.0;
  std::uint64_t violations = 0;
  int full = 0;
  for (int i = 0; i < episodes; ++i) {
    auto ep = deterministic_episode(art.task, art.policy);
    sum += ep.total_reward;
    if (ep.violated) ++violations;
    if (ep.transitions.size() == std::size_t(art.task.horizon)) ++full;
  }
  json j;
  j["run"] = run_dir;
  j["task"] = art.cfg.task;
  j["epoch"] = art.epoch;
  j["episodes"] = episodes;
  j["mean_return"] = sum / episodes;
  j["violations"] = violations;
  j["full_horizon_episodes"] = full;
  std::cout << j.dump(2) << "\n";
  return violations != 0 ? 1 : 0;
}

int do_certify_check(const std::string& run_dir, int epoch, int resolution,
                     std::uint64_t samples, const std::string& out_file) {
  RunArtifacts art = load_artifacts(run_dir, epoch);
  SafetyOp op{&art.cert, &art.ens, 0.0};
  auto unsafe_pred = [&art](const Vec& s) { return !is_safe(art.task, s); };

  const int dim = art.task.state_dim;
  if (resolution <= 0) resolution = dim == 2 ? 200 : 13;
  const bool grid = dim <= 4;
  AuditResult res;
  if (dim == 2)
    res = grid_audit_2d(op, art.policy, unsafe_pred, art.task.audit_lo,
                        art.task.audit_hi, resolution);
  else if (grid)
    res = grid_audit_nd(op, art.policy, unsafe_pred, art.task.audit_lo,
                        art.task.audit_hi, resolution);
  else
    res = mc_audit(op, art.policy, unsafe_pred, art.task.audit_lo,
                   art.task.audit_hi, samples, Rng(art.cfg.seed ^ 0xa0d17ull));

  const double h_s0 = art.cert.value(art.task.s0);
  const double tol = 1e-3;
  const bool r1 = h_s0 > 0.0;
  const bool r2 = res.excludes_unsafe();
  const bool r3 = res.invariant(tol);
  json j;
  j["run"] = run_dir;
  j["epoch"] = art.epoch;
  j["mode"] = grid ? "grid" : "mc";
  if (grid)
    j["resolution"] = resolution;
  else
    j["samples"] = samples;
  j["box_lo"] = json(art.task.audit_lo);
  j["box_hi"] = json(art.task.audit_hi);
  j["total_points"] = res.total;
  j["certified_points"] = res.certified;
  j["unsafe_points"] = res.unsafe_points;
  j["h_at_start"] = h_s0;
  j["max_u_certified"] = res.certified > 0 ? json(res.max_u_certified) : json();
  j["max_h_unsafe"] = res.unsafe_points > 0 ? json(res.max_h_unsafe) : json();
  j["u_tolerance"] = tol;
  j["start_state_certified"] = r1;
  j["excludes_unsafe"] = r2;
  j["invariant"] = r3;
  j["pass"] = r1 && r2 && r3;
  std::string text = j.dump(2) + "\n";
  std::cout << text;
  if (!out_file.empty()) {
    std::ofstream out(out_file, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + out_file);
    out << text;
  }
  return (r1 && r2 && r3) ? 0 : 1;
}

// ---------------------------------------------------------- metrics export

std::vector<json> read_metrics(const std::string& run_dir) {
  std::ifstream in(run_dir + "/metrics.jsonl");
  if (!in) throw ConfigError("no metrics data in " + run_dir);
  std::vector<json> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      lines.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw ConfigError("bad metrics line in " + run_dir + ": " + e.what());
    }
  }
  if (lines.empty()) throw ConfigError("no metrics data in " + run_dir);
  return lines;
}

std::vector<std::string> schema_of(const json& line) {
  std::vector<std::string> keys;
  for (auto it = line.begin(); it != line.end(); ++it) keys.push_back(it.key());
  return keys;
}

double as_number(const json& v) {
  if (v.is_boolean()) return v.get<bool>() ? 1.0 : 0.0;
  return v.get<double>();
}

int do_export(const std::vector<std::string>& dirs, const std::string& format,
              const std::string& out_file) {
  std::vector<std::vector<json>> runs;
  for (const auto& d : dirs) runs.push_back(read_metrics(d));

  const std::vector<std::string> schema = schema_of(runs[0][0]);
  for (std::size_t k = 0; k < runs.size(); ++k) {
    if (runs[k].size() != runs[0].size())
      throw ConfigError("incompatible runs: " + dirs[k] + " has " +
                        std::to_string(runs[k].size()) + " epochs, " +
                        dirs[0] + " has " + std::to_string(runs[0].size()));
    for (const auto& line : runs[k])
      if (schema_of(line) != schema)
        throw ConfigError("mixed metrics schemas: " + dirs[k] +
                          " does not match " + dirs[0]);
  }

  const bool aggregate = runs.size() > 1;
  std::vector<std::string> columns = {"schema", "runs", "epoch"};
  for (const auto& key : schema) {
    if (key == "epoch") continue;
    if (aggregate) {
      columns.push_back(key + "_mean");
      columns.push_back(key + "_std");
    } else {
      columns.push_back(key);
    }
  }

  std::vector<json> rows;
  for (std::size_t e = 0; e < runs[0].size(); ++e) {
    json row;
    row["schema"] = 1;
    row["runs"] = runs.size();
    row["epoch"] = runs[0][e]["epoch"];
    for (const auto& key : schema) {
      if (key == "epoch") continue;
      if (aggregate) {
        double mean = 0.0;
        for (const auto& r : runs) mean += as_number(r[e].at(key));
        mean /= double(runs.size());
        double var = 0.0;
        for (const auto& r : runs) {
          double d = as_number(r[e].at(key)) - mean;
          var += d * d;
        }
        row[key + "_mean"] = mean;
        row[key + "_std"] = std::sqrt(var / double(runs.size()));
      } else {
        row[key] = runs[0][e].at(key);
      }
    }
    rows.push_back(std::move(row));
  }

  std::string text;
  if (format == "jsonl") {
    for (const auto& row : rows) text += row.dump() + "\n";
  } else {
    for (std::size_t i = 0; i < columns.size(); ++i)
      text += (i ? "," : "") + columns[i];
    text += "\n";
    for (const auto& row : rows) {
      for (std::size_t i = 0; i < columns.size(); ++i) {
        const json& cell = row.at(columns[i]);
        text += (i ? "," : "") +
                (cell.is_string() ? cell.get<std::string>() : cell.dump());
      }
      text += "\n";
    }
  }
  if (out_file.empty()) {
    std::cout << text;
  } else {
    std::ofstream out(out_file, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + out_file);
    out << text;
  }
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{
      "Safe reinforcement learning with a co-trained neural barrier "
      "certificate"};
  app.require_subcommand(1);

  TrainCli train_args;
  CLI::App* train_cmd = app.add_subcommand(
      "train", "run the full training pipeline, writing a run directory");
  add_train_options(train_cmd, train_args);
  train_cmd->add_flag("--resume", train_args.resume,
                      "continue an interrupted run from its state.bin");

  TrainCli boot_args;
  CLI::App* boot_cmd = app.add_subcommand(
      "bootstrap", "run only the initial-policy stage and write its artifacts");
  add_train_options(boot_cmd, boot_args);

  std::string eval_run;
  int eval_epoch = -1, eval_episodes = 10;
  CLI::App* eval_cmd = app.add_subcommand(
      "eval", "roll out a checkpoint's deterministic policy");
  eval_cmd->add_option("--run", eval_run, "run directory")->required();
  eval_cmd->add_option("--epoch", eval_epoch,
                       "checkpoint epoch (default: latest)");
  eval_cmd->add_option("--episodes", eval_episodes, "episode count")
      ->check(CLI::PositiveNumber);

  std::string check_run, check_out;
  int check_epoch = -1, check_res = 0;
  std::uint64_t check_samples = 200000;
  CLI::App* check_cmd = app.add_subcommand(
      "certify-check",
      "audit a checkpoint's certificate against its policy and model");
  check_cmd->add_option("--run", check_run, "run directory")->required();
  check_cmd->add_option("--epoch", check_epoch,
                        "checkpoint epoch (default: latest)");
  check_cmd->add_option("--resolution", check_res,
                        "grid points per axis (default 200 for 2D tasks, 13 "
                        "for 4D)");
  check_cmd->add_option("--samples", check_samples,
                        "Monte-Carlo samples when the state has more than 4 "
                        "dimensions");
  check_cmd->add_option("--out", check_out, "also write the report here");

  std::vector<std::string> export_dirs;
  std::string export_format = "csv", export_out;
  CLI::App* export_cmd = app.add_subcommand(
      "export-metrics",
      "flatten per-epoch metrics to CSV/JSONL; several runs aggregate to "
      "mean and standard deviation per epoch");
  export_cmd->add_option("runs", export_dirs, "run directories")
      ->required()
      ->expected(-1);
  export_cmd->add_option("--format", export_format, "csv | jsonl")
      ->check(CLI::IsMember({"csv", "jsonl"}));
  export_cmd->add_option("--out", export_out, "output file (default stdout)");

  try {
    app.parse(argc, argv);
    if (train_cmd->parsed()) return do_train(train_args);
    if (boot_cmd->parsed()) return do_bootstrap(boot_args);
    if (eval_cmd->parsed()) return do_eval(eval_run, eval_epoch, eval_episodes);
    if (check_cmd->parsed())
      return do_certify_check(check_run, check_epoch, check_res, check_samples,
                              check_out);
    if (export_cmd->parsed())
      return do_export(export_dirs, export_format, export_out);
    return 2;
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace crabs
