#include "crabs/orchestrator.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "crabs/serialize.hpp"
#include "json.hpp"

namespace crabs {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---------------------------------------------------------------- reporting

std::string epoch_report_json(const EpochReport& r) {
  json j;
  j["epoch"] = r.epoch;
  j["episodes"] = r.episodes;
  j["violations"] = r.violations;
  j["shield_activations"] = r.shield_activations;
  j["collect_mean_return"] = r.collect_mean_return;
  j["eval_mean_return"] = r.eval_mean_return;
  j["c_star"] = r.c_star;
  j["cert_ok"] = r.cert_ok;
  j["rolled_back"] = r.rolled_back;
  j["certified_volume"] = r.certified_volume;
  j["mean_uncertainty"] = r.mean_uncertainty;
  j["mean_model_nll"] = r.mean_model_nll;
  j["sac_alpha"] = r.sac_alpha;
  return j.dump();
}

// ----------------------------------------------------- handmade barrier

double HandcraftedBarrier::value(const Vec& s) const {
  double t = s[0] / theta_max, d = s[1] / thd_ref;
  return 1.0 - t * t - c * d * d;
}

double HandcraftedBarrier::value_grad(const Vec& s, Vec& grad) const {
  grad.assign(s.size(), 0.0);
  grad[0] = -2.0 * s[0] / (theta_max * theta_max);
  grad[1] = -2.0 * c * s[1] / (thd_ref * thd_ref);
  return value(s);
}

HandcraftedBarrier handcrafted_certificate(const TaskSpec& task,
                                           const RunConfig& cfg) {
  if (task.is_cartpole())
    throw ConfigError(
        "fixed_certificate: the handmade barrier covers the pendulum tasks "
        "only");
  HandcraftedBarrier h;
  h.theta_max = task.theta_max;
  h.c = cfg.handcrafted_c;
  h.thd_ref = cfg.handcrafted_thd_ref;
  return h;
}

// ------------------------------------------------------------ env rollouts

ShieldedRollout deterministic_episode(const TaskSpec& task, const PolicyFn& pi) {
  ShieldedRollout out;
  Vec s = initial_state(task), a;
  for (int t = 0; t < task.horizon; ++t) {
    pi.act(s, a);
    auto res = env_step(task, s, a);
    Transition tr;
    tr.s = s;
    tr.a = a;
    tr.next = res.next;
    tr.r = res.r;
    tr.done = res.violated || t + 1 == task.horizon;
    tr.safe = !res.violated;
    out.transitions.push_back(std::move(tr));
    out.total_reward += res.r;
    s = res.next;
    if (res.violated) {
      out.violated = true;
      break;
    }
  }
  return out;
}

// ----------------------------------------------------------------- file IO

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << text;
  if (!out) throw std::runtime_error("short write: " + path);
}

void blob_to_writer(const std::vector<std::uint8_t>& blob, ByteWriter& w) {
  w.u64(blob.size());
  w.buf.insert(w.buf.end(), blob.begin(), blob.end());
}

std::vector<std::uint8_t> blob_from_reader(ByteReader& r) {
  std::size_t n = std::size_t(r.u64());
  r.need(n);
  std::vector<std::uint8_t> blob(r.buf.begin() + long(r.pos),
                                 r.buf.begin() + long(r.pos + n));
  r.pos += n;
  return blob;
}

void rng_to_writer(const Rng& rng, ByteWriter& w) {
  for (auto v : rng.s) w.u64(v);
}

void rng_from_reader(Rng& rng, ByteReader& r) {
  for (auto& v : rng.s) v = r.u64();
}

std::string epoch_tag(int e) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "epoch_%03d", e);
  return buf;
}

json vec_json(const Vec& v) { return json(v); }

}  // namespace

// ----------------------------------------------------------- bootstrapping

BootstrapResult bootstrap_initial_policy(const TaskSpec& task,
                                         const RunConfig& cfg, Rng& rng,
                                         ReplayBuffer* keep_transitions) {
  BootstrapResult out{
      SquashedGaussianPolicy::make(task.state_dim, task.action_dim,
                                   cfg.policy_hidden, rng.next_u64()),
      SacState{}, -1, 0, 0};
  out.sac = SacState::make(task.state_dim, task.action_dim, cfg.policy_hidden,
                           out.policy, cfg.sac, rng.next_u64());
  Rng env_rng = rng.fork(1);

  TrivialCertificate everything;
  ExactDynamics exact(task);
  SafetyOp op{&everything, &exact, 0.0};

  ReplayBuffer scratch;
  ReplayBuffer& buf = keep_transitions ? *keep_transitions : scratch;
  Vec s = initial_state(task), a(std::size_t(task.action_dim), 0.0);
  int ep_len = 0;
  auto push_step = [&](const Vec& action) {
    auto res = env_step(task, s, action);
    ++ep_len;
    Transition tr;
    tr.s = s;
    tr.a = action;
    tr.next = res.next;
    tr.r = res.r;
    tr.done = res.violated || ep_len == task.horizon;
    tr.safe = !res.violated;
    buf.push(std::move(tr));
    if (res.violated) ++out.violations;
    if (res.violated || ep_len == task.horizon) {
      s = initial_state(task);
      ep_len = 0;
    } else {
      s = res.next;
    }
  };

  for (int i = 0; i < cfg.bootstrap_warmup; ++i) {
    for (auto& x : a) x = env_rng.uniform(-1.0, 1.0);
    push_step(a);
  }
  ActionSample smp;
  for (int step = 1; step <= cfg.bootstrap_max_steps; ++step) {
    sample_exploration(out.policy, s, env_rng, smp);
    push_step(smp.a);
    sac_epoch(out.policy, out.sac, op, buf, 1, nullptr, nullptr, nullptr);
    if (step % cfg.bootstrap_check_every == 0) {
      int idx = step / cfg.bootstrap_check_every;
      auto probe = deterministic_episode(task, out.policy);
      if (probe.violated) ++out.violations;
      if (!probe.violated &&
          probe.transitions.size() == std::size_t(task.horizon)) {
        out.checkpoint_index = idx;
        out.steps_used = step;
        return out;
      }
    }
  }
  throw std::runtime_error(
      "bootstrap failed: no safe deterministic checkpoint within " +
      std::to_string(cfg.bootstrap_max_steps) + " steps (" +
      std::to_string(out.violations) + " training violations)");
}

int bootstrap_initial_model(const TaskSpec& task,
                            const SquashedGaussianPolicy& policy,
                            const RunConfig& cfg, EnsembleDynamics& ens,
                            ReplayBuffer& buf, Rng& rng) {
  if (!task.is_cartpole()) return 0;  // pendulum tasks skip pretraining
  const int cap = 20 * cfg.pretrain_trajectories;
  int kept = 0, pushed = 0;
  ActionSample smp;
  std::vector<Transition> episode;
  for (int attempt = 0; attempt < cap && kept < cfg.pretrain_trajectories;
       ++attempt) {
    episode.clear();
    Vec s = initial_state(task);
    bool violated = false;
    for (int t = 0; t < task.horizon; ++t) {
      sample_exploration(policy, s, rng, smp);
      auto res = env_step(task, s, smp.a);
      Transition tr;
      tr.s = s;
      tr.a = smp.a;
      tr.next = res.next;
      tr.r = res.r;
      tr.done = res.violated || t + 1 == task.horizon;
      tr.safe = !res.violated;
      episode.push_back(std::move(tr));
      s = res.next;
      if (res.violated) {
        violated = true;
        break;
      }
    }
    if (violated) continue;  // a violating rollout never enters the buffer
    for (auto& tr : episode) {
      buf.push(std::move(tr));
      ++pushed;
    }
    ++kept;
  }
  if (kept < cfg.pretrain_trajectories)
    throw std::runtime_error(
        "model pretraining could not collect enough violation-free rollouts "
        "(" +
        std::to_string(kept) + "/" + std::to_string(cfg.pretrain_trajectories) +
        ")");
  train_ensemble(ens, buf, cfg.pretrain_steps, cfg.model_batch);
  return pushed;
}

// ------------------------------------------------------------- run plumbing

namespace {

// Whole-run mutable state; everything needed to reproduce the remaining
// epochs bit-exactly lives here and round-trips through state.bin.
struct Runner {
  RunConfig cfg;
  TaskSpec task;
  Rng master;

  SquashedGaussianPolicy pi;
  SacState sac;
  EnsembleDynamics ens;
  ReplayBuffer buf;
  BarrierCertificate cert;
  AdamState cert_adam;
  CandidateSet cands;
  HandcraftedBarrier fixed_h;

  std::vector<EpochReport> reports;
  std::uint64_t crabs_violations = 0, bootstrap_violations = 0;
  int bootstrap_checkpoint = -1;
  int next_epoch = 0;
  bool have_certificate = false;

  // last certified (certificate, policy) pair, as serialized bytes
  std::vector<std::uint8_t> snap_cert, snap_pi;

  const StateValueFn* active_h() const {
    return cfg.fixed_certificate
               ? static_cast<const StateValueFn*>(&fixed_h)
               : static_cast<const StateValueFn*>(&cert);
  }

  void take_snapshot() {
    ByteWriter wc;
    net_to_writer(cert.f, wc);
    snap_cert = std::move(wc.buf);
    ByteWriter wp;
    policy_to_writer(pi, wp);
    snap_pi = std::move(wp.buf);
  }

  void restore_snapshot() {
    ByteReader rc;
    rc.buf = snap_cert;
    cert.f = net_from_reader(rc);
    cert.refresh();
    ByteReader rp;
    rp.buf = snap_pi;
    pi = policy_from_reader(rp);
  }
};

constexpr char kStateMagic[9] = "CRABSRUN";

void report_to_writer(const EpochReport& r, ByteWriter& w) {
  w.u32(std::uint32_t(r.epoch));
  w.u32(std::uint32_t(r.episodes));
  w.u64(r.violations);
  w.u32(std::uint32_t(r.shield_activations));
  w.f64(r.collect_mean_return);
  w.f64(r.eval_mean_return);
  w.f64(r.c_star);
  w.u8(r.cert_ok ? 1 : 0);
  w.u8(r.rolled_back ? 1 : 0);
  w.f64(r.certified_volume);
  w.f64(r.mean_uncertainty);
  w.f64(r.mean_model_nll);
  w.f64(r.sac_alpha);
}

EpochReport report_from_reader(ByteReader& r) {
  EpochReport rep;
  rep.epoch = int(r.u32());
  rep.episodes = int(r.u32());
  rep.violations = r.u64();
  rep.shield_activations = int(r.u32());
  rep.collect_mean_return = r.f64();
  rep.eval_mean_return = r.f64();
  rep.c_star = r.f64();
  rep.cert_ok = r.u8() != 0;
  rep.rolled_back = r.u8() != 0;
  rep.certified_volume = r.f64();
  rep.mean_uncertainty = r.f64();
  rep.mean_model_nll = r.f64();
  rep.sac_alpha = r.f64();
  return rep;
}

void state_to_writer(const Runner& st, ByteWriter& w) {
  w.magic(kStateMagic);
  w.u32(1);
  w.u32(std::uint32_t(st.next_epoch));
  w.u64(st.crabs_violations);
  w.u64(st.bootstrap_violations);
  w.u32(std::uint32_t(st.bootstrap_checkpoint + 1));  // -1 -> 0
  w.u8(st.have_certificate ? 1 : 0);
  rng_to_writer(st.master, w);
  policy_to_writer(st.pi, w);
  sac_to_writer(st.sac, w);
  ens_to_writer(st.ens, w);
  net_to_writer(st.cert.f, w);
  adam_to_writer(st.cert_adam, w);
  candidates_to_writer(st.cands, w);
  buffer_to_writer(st.buf, w);
  w.u64(st.reports.size());
  for (const auto& r : st.reports) report_to_writer(r, w);
  blob_to_writer(st.snap_cert, w);
  blob_to_writer(st.snap_pi, w);
}

void state_from_reader(Runner& st, ByteReader& r) {
  char magic[9] = {};
  for (int i = 0; i < 8; ++i) magic[i] = char(r.u8());
  if (std::string(magic) != kStateMagic)
    throw std::runtime_error("state.bin: bad magic");
  if (r.u32() != 1) throw std::runtime_error("state.bin: unknown version");
  st.next_epoch = int(r.u32());
  st.crabs_violations = r.u64();
  st.bootstrap_violations = r.u64();
  st.bootstrap_checkpoint = int(r.u32()) - 1;
  st.have_certificate = r.u8() != 0;
  rng_from_reader(st.master, r);
  st.pi = policy_from_reader(r);
  st.sac = SacState::make(st.task.state_dim, st.task.action_dim,
                          st.cfg.policy_hidden, st.pi, st.cfg.sac, 0);
  sac_from_reader(st.sac, r);
  st.sac.cfg = st.cfg.sac;
  st.ens = ens_from_reader(r);
  st.cert.f = net_from_reader(r);
  st.cert.refresh();
  adam_from_reader(st.cert_adam, r);
  candidates_from_reader(st.cands, r);
  buffer_from_reader(st.buf, r);
  std::size_t n = std::size_t(r.u64());
  st.reports.clear();
  for (std::size_t i = 0; i < n; ++i) st.reports.push_back(report_from_reader(r));
  st.snap_cert = blob_from_reader(r);
  st.snap_pi = blob_from_reader(r);
}

void persist_state(const Runner& st, const std::string& path) {
  ByteWriter w;
  state_to_writer(st, w);
  w.to_file(path);
}

void rewrite_metrics(const Runner& st) {
  std::string text;
  for (const auto& r : st.reports) text += epoch_report_json(r) + "\n";
  write_text(st.cfg.out_dir + "/metrics.jsonl", text);
}

void write_trajectories(const Runner& st, int epoch,
                        const std::vector<ShieldedRollout>& rolls) {
  std::string text;
  for (std::size_t i = 0; i < rolls.size(); ++i) {
    const auto& roll = rolls[i];
    json j;
    j["episode"] = i;
    j["source"] = proposal_source_name(roll.source);
    j["violated"] = roll.violated;
    j["shield_activations"] = roll.shield_activations;
    j["total_reward"] = roll.total_reward;
    json steps = json::array();
    const bool screened = !roll.h_at_state.empty();
    for (std::size_t t = 0; t < roll.transitions.size(); ++t) {
      const auto& tr = roll.transitions[t];
      json s;
      s["s"] = vec_json(tr.s);
      s["a"] = vec_json(tr.a);
      s["r"] = tr.r;
      if (screened) {
        s["h"] = roll.h_at_state[t];
        s["u"] = roll.u_at_action[t];
      } else {
        s["h"] = nullptr;
        s["u"] = nullptr;
      }
      s["shielded"] = screened ? bool(roll.shielded[t]) : false;
      steps.push_back(std::move(s));
    }
    j["steps"] = std::move(steps);
    text += j.dump() + "\n";
  }
  write_text(st.cfg.out_dir + "/trajectories/" + epoch_tag(epoch) + ".jsonl",
             text);
}

void write_checkpoint(const Runner& st, int epoch) {
  fs::path dir = fs::path(st.cfg.out_dir) / "checkpoints" / epoch_tag(epoch);
  fs::create_directories(dir);
  {
    ByteWriter w;
    policy_to_writer(st.pi, w);
    w.to_file((dir / "policy.bin").string());
  }
  {
    ByteWriter w;
    net_to_writer(st.cert.f, w);
    w.vec(st.cert.s0);
    w.to_file((dir / "certificate.bin").string());
  }
  {
    ByteWriter w;
    ens_to_writer(st.ens, w);
    w.to_file((dir / "ensemble.bin").string());
  }
}

void dump_abort(const Runner& st, const std::string& reason) {
  persist_state(st, st.cfg.out_dir + "/state_dump.bin");
  json j;
  j["reason"] = reason;
  j["epoch"] = st.next_epoch;
  j["violations"] = st.crabs_violations;
  write_text(st.cfg.out_dir + "/abort.json", j.dump(2) + "\n");
}

double mean_return_of(const std::vector<ShieldedRollout>& rolls) {
  if (rolls.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : rolls) s += r.total_reward;
  return s / double(rolls.size());
}

// Train the barrier for one round and handle the certified-pair snapshot /
// rollback bookkeeping. Returns whether the policy phase should run.
bool certificate_phase(Runner& st, EpochReport& rep) {
  if (st.cfg.fixed_certificate) {
    // ablation: never trained; refresh the adversarial candidates so C* and
    // the policy phase see the fixed barrier
    SafetyOp op{st.active_h(), &st.ens, 0.0};
    TargetDensity tgt =
        adversarial_target(op, st.pi, st.cfg.lambda1, st.cfg.lambda2,
                           st.task.audit_lo, st.task.audit_hi);
    refresh_candidates(st.cands, tgt, *st.active_h(), st.task.s0,
                       st.cfg.cert_mala_steps);
    auto cs = c_star(op, st.pi, st.cands.states);
    rep.c_star = cs.empty_certified ? 0.0 : cs.value;
    rep.cert_ok = true;
    st.have_certificate = true;
    return true;
  }
  BarrierCertificate prev = st.cert;  // reference set for the growth term
  CertTrainConfig ct;
  ct.iters = st.cfg.cert_iters;
  ct.mala_steps = st.cfg.cert_mala_steps;
  ct.lambda_reg = st.cfg.lambda_reg;
  ct.lambda1 = st.cfg.lambda1;
  ct.lambda2 = st.cfg.lambda2;
  ct.box_lo = st.task.audit_lo;
  ct.box_hi = st.task.audit_hi;
  auto res = train_certificate(st.cert, st.pi, st.ens, st.cands, prev,
                               st.cert_adam, ct);
  rep.c_star = res.final_c_star;
  rep.cert_ok = res.ok;
  if (res.ok) {
    st.have_certificate = true;
    st.take_snapshot();
    return true;
  }
  if (st.have_certificate) {
    // keep collecting with the last certified pair; skip the policy phase so
    // the restored pair stays intact
    st.restore_snapshot();
    rep.rolled_back = true;
  }
  return false;
}

void one_epoch(Runner& st, int e, RunResult& result) {
  EpochReport rep;
  rep.epoch = e;
  rep.violations = st.crabs_violations;

  // ---- collect ----------------------------------------------------------
  std::vector<ShieldedRollout> rolls;
  if (st.have_certificate) {
    SafetyOp op{st.active_h(), &st.ens, 0.0};
    Rng collect_rng = st.master.fork(1000 + std::uint64_t(e));
    for (ProposalSource src : episode_schedule(st.task))
      rolls.push_back(collect_episode(st.task, op, st.pi, st.pi, src,
                                      collect_rng, st.cfg.shield));
  } else {
    // no certificate yet: the bootstrap-verified deterministic policy is the
    // only safe actor available
    rolls.push_back(deterministic_episode(st.task, st.pi));
  }
  rep.episodes = int(rolls.size());
  rep.collect_mean_return = mean_return_of(rolls);
  bool violated = false;
  for (const auto& roll : rolls) {
    for (const auto& tr : roll.transitions) st.buf.push(tr);
    rep.shield_activations += roll.shield_activations;
    if (roll.violated) {
      violated = true;
      ++st.crabs_violations;
    }
  }
  write_trajectories(st, e, rolls);
  if (violated) {
    rep.violations = st.crabs_violations;
    st.reports.push_back(rep);
    rewrite_metrics(st);
    dump_abort(st, "safety violation during collection at epoch " +
                       std::to_string(e));
    result.aborted = true;
    result.abort_reason = "collection violation at epoch " + std::to_string(e);
    return;
  }

  // ---- model ------------------------------------------------------------
  NllTrace trace;
  train_ensemble(st.ens, st.buf, st.cfg.model_steps, st.cfg.model_batch,
                 &trace);
  double nll = 0.0;
  int nll_n = 0;
  for (const auto& member : trace.member_nll)
    if (!member.empty()) {
      nll += member.back();
      ++nll_n;
    }
  rep.mean_model_nll = nll_n > 0 ? nll / nll_n : 0.0;

  // ---- certificate ------------------------------------------------------
  bool run_policy = certificate_phase(st, rep);

  // ---- policy -----------------------------------------------------------
  if (run_policy) {
    SafetyOp op{st.active_h(), &st.ens, 0.0};
    TargetDensity tgt =
        adversarial_target(op, st.pi, st.cfg.lambda1, st.cfg.lambda2,
                           st.task.audit_lo, st.task.audit_hi);
    auto stats = sac_epoch(st.pi, st.sac, op, st.buf, st.cfg.policy_steps,
                           &st.cands, &tgt, &st.task.s0);
    rep.sac_alpha = stats.mean_alpha;
  } else {
    rep.sac_alpha = st.sac.alpha();
  }

  // ---- evaluation and probes --------------------------------------------
  double eval_sum = 0.0;
  for (int i = 0; i < st.cfg.eval_episodes; ++i) {
    auto ep = deterministic_episode(st.task, st.pi);
    eval_sum += ep.total_reward;
    if (ep.violated) ++st.crabs_violations;
  }
  rep.eval_mean_return = eval_sum / st.cfg.eval_episodes;

  rep.certified_volume =
      certified_volume(*st.active_h(), st.task.audit_lo, st.task.audit_hi,
                       st.cfg.volume_samples,
                       st.master.fork(2000 + std::uint64_t(e)));
  Rng probe_rng = st.master.fork(3000 + std::uint64_t(e));
  double unc = 0.0;
  Vec probe(std::size_t(st.task.state_dim), 0.0);
  for (int i = 0; i < st.cfg.uncertainty_probes; ++i) {
    for (int d = 0; d < st.task.state_dim; ++d)
      probe[std::size_t(d)] = probe_rng.uniform(st.task.safe_lo[std::size_t(d)],
                                                st.task.safe_hi[std::size_t(d)]);
    unc += uncertainty(st.ens, probe, st.task.action_dim);
  }
  rep.mean_uncertainty = unc / st.cfg.uncertainty_probes;
  rep.violations = st.crabs_violations;

  // ---- persist ----------------------------------------------------------
  st.reports.push_back(rep);
  st.next_epoch = e + 1;
  write_checkpoint(st, e);
  rewrite_metrics(st);
  persist_state(st, st.cfg.out_dir + "/state.bin");
}

void write_final_report(const Runner& st, const RunResult& result) {
  json j;
  j["task"] = st.cfg.task;
  j["seed"] = st.cfg.seed;
  j["epochs_completed"] = int(st.reports.size());
  j["crabs_violations"] = result.crabs_violations;
  j["bootstrap_violations"] = result.bootstrap_violations;
  j["bootstrap_checkpoint"] = result.bootstrap_checkpoint;
  j["final_eval_return"] = result.final_eval_return;
  j["aborted"] = result.aborted;
  j["abort_reason"] = result.abort_reason;
  write_text(st.cfg.out_dir + "/final_report.json", j.dump(2) + "\n");
}

}  // namespace

RunResult run(const RunConfig& cfg, bool resume, int stop_after) {
  cfg.validate();
  Runner st;
  st.cfg = cfg;
  st.task = cfg.task_spec();
  if (cfg.fixed_certificate)
    st.fixed_h = handcrafted_certificate(st.task, cfg);

  fs::create_directories(cfg.out_dir);
  fs::create_directories(cfg.out_dir + "/trajectories");
  fs::create_directories(cfg.out_dir + "/checkpoints");

  RunResult result;
  const std::string state_path = cfg.out_dir + "/state.bin";
  const std::string cfg_snapshot = config_to_json_text(cfg);
  const bool resuming = resume && fs::exists(state_path);
  if (resuming) {
    std::ifstream in(cfg.out_dir + "/config.json");
    std::stringstream ss;
    ss << in.rdbuf();
    if (ss.str() != cfg_snapshot)
      throw ConfigError(
          "resume: config does not match the snapshot in " + cfg.out_dir);
    // rebuild fixed-shape members before overwriting them from disk
    st.cert = make_task_certificate(st.task, cfg.cert_hidden, 0);
    ByteReader r = ByteReader::from_file(state_path);
    state_from_reader(st, r);
    result.resumed = true;
  } else {
    write_text(cfg.out_dir + "/config.json", cfg_snapshot);
    st.master = Rng(cfg.seed);

    // Pendulum tasks skip model pretraining, so the exploration data from
    // bootstrapping is the only broad-coverage sample of the state box the
    // ensemble will ever see; keep it. Cartpole tasks get a dedicated
    // pretraining dataset below and start the epoch buffer from that.
    auto boot = bootstrap_initial_policy(
        st.task, cfg, st.master, st.task.is_cartpole() ? nullptr : &st.buf);
    st.pi = std::move(boot.policy);
    st.sac = std::move(boot.sac);
    st.bootstrap_violations = boot.violations;
    st.bootstrap_checkpoint = boot.checkpoint_index;

    st.ens = EnsembleDynamics::make_for_task(st.task, cfg.ensemble_k,
                                             cfg.model_hidden,
                                             st.master.next_u64());
    st.cert =
        make_task_certificate(st.task, cfg.cert_hidden, st.master.next_u64());
    st.cert_adam.init(std::size_t(st.cert.f.param_count()), cfg.cert_lr, 0.0);
    st.cands.target_accept = cfg.target_accept;
    st.cands.init(cfg.candidates, st.task.safe_lo, st.task.safe_hi,
                  st.master.fork(7));

    if (st.task.is_cartpole()) {
      Rng pre_rng = st.master.fork(8);
      bootstrap_initial_model(st.task, st.pi, cfg, st.ens, st.buf, pre_rng);
      // with a pretrained model the first certificate can precede epoch 0,
      // so even the first collection is screened
      EpochReport pre;
      certificate_phase(st, pre);
    }
    persist_state(st, state_path);
  }
  result.bootstrap_violations = st.bootstrap_violations;
  result.bootstrap_checkpoint = st.bootstrap_checkpoint;

  try {
    const int first = st.next_epoch;
    for (int e = first; e < cfg.epochs; ++e) {
      if (stop_after >= 0 && e - first >= stop_after) break;
      one_epoch(st, e, result);
      if (result.aborted) break;
    }
  } catch (const NumericalError& err) {
    dump_abort(st, std::string("numerical abort: ") + err.what());
    throw;
  }

  result.reports = st.reports;
  result.crabs_violations = st.crabs_violations;
  if (!st.reports.empty())
    result.final_eval_return = st.reports.back().eval_mean_return;
  write_final_report(st, result);
  return result;
}

}  // namespace crabs
