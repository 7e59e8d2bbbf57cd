#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crabs/audit.hpp"
#include "crabs/buffer.hpp"
#include "crabs/certificate.hpp"
#include "crabs/dynamics.hpp"
#include "crabs/env.hpp"
#include "crabs/policy.hpp"
#include "crabs/shield.hpp"

namespace crabs {

// Everything a training run needs, with two presets: `desk` fits a laptop
// core (small nets, short budgets), `paper` carries the full-scale values.
// Serialized as JSON alongside every run so results are reproducible.
struct RunConfig {
  std::string task = "upright";
  std::string profile = "desk";
  std::uint64_t seed = 1;
  std::string out_dir = "runs/upright";
  bool fixed_certificate = false;  // ablation: fixed handmade barrier, never trained

  // epoch loop budgets
  int epochs = 50;
  int model_steps = 1000;   // ensemble Adam steps per epoch
  int cert_iters = 500;     // barrier training iterations per epoch
  int policy_steps = 2000;  // constrained-SAC steps per epoch
  int ensemble_k = 5;
  int model_batch = 256;

  // network widths
  std::vector<int> policy_hidden = {64, 64};
  std::vector<int> cert_hidden = {64, 64};
  std::vector<int> model_hidden = {64, 64};

  // adversarial sampler
  int candidates = 256;  // MALA chain count m
  double lambda1 = 30.0;
  double lambda2 = 1000.0;
  double target_accept = 0.6;
  double lambda_reg = 0.001;
  int cert_mala_steps = 5;  // chain steps per certificate-phase refresh
  double cert_lr = 1e-3;

  SacConfig sac;
  ShieldConfig shield;

  // pre-loop stages
  int bootstrap_max_steps = 30000;
  int bootstrap_check_every = 2000;
  int bootstrap_warmup = 1000;        // uniform-action steps before SAC updates
  int pretrain_trajectories = 50;     // model pretraining (cartpole tasks only)
  int pretrain_steps = 2000;

  // evaluation and probes
  int eval_episodes = 10;
  std::uint64_t volume_samples = 4096;  // Monte-Carlo certified-volume draws
  int uncertainty_probes = 256;

  // handmade-barrier ablation shape: h = 1 - (th/th_max)^2 - c (thd/thd_ref)^2
  double handcrafted_c = 1.0;
  double handcrafted_thd_ref = 8.0;

  TaskSpec task_spec() const;  // resolves the task name; throws ConfigError
  void validate() const;       // budget positivity etc.; throws ConfigError
};

// Preset bundles. `desk` is the default above; `paper` switches to the
// full-scale budgets (10^5-step bootstrap, 10^4 MALA chains, 256/400-wide
// nets, 500 pretraining trajectories).
RunConfig make_profile(const std::string& task, const std::string& profile);

// JSON round trip. Parsing rejects unknown keys and reports the offending
// field by name; emitted text parses back to an identical config.
RunConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const RunConfig& cfg);
RunConfig config_from_file(const std::string& path);

struct EpochReport {
  int epoch = 0;
  int episodes = 0;
  std::uint64_t violations = 0;  // cumulative over the whole run; must stay 0
  int shield_activations = 0;    // this epoch's collection
  double collect_mean_return = 0.0;
  double eval_mean_return = 0.0;
  double c_star = 0.0;  // after certificate training
  bool cert_ok = false;
  bool rolled_back = false;
  double certified_volume = 0.0;   // Monte-Carlo fraction of the audit box
  double mean_uncertainty = 0.0;   // model disagreement over probe states
  double mean_model_nll = 0.0;     // final training mini-batch, member mean
  double sac_alpha = 0.0;
};

std::string epoch_report_json(const EpochReport& r);  // one JSONL line

struct BootstrapResult {
  SquashedGaussianPolicy policy;
  SacState sac;
  int checkpoint_index = -1;   // which periodic evaluation was selected
  int steps_used = 0;
  std::uint64_t violations = 0;  // separate ledger from the CRABS phase
};

// Unconstrained soft actor-critic with the task's violation penalty; every
// `check_every` environment steps the deterministic policy is rolled out
// once, and the first checkpoint that finishes the full horizon without a
// violation is returned. Throws std::runtime_error when the budget runs out
// with no safe checkpoint. When `keep_transitions` is non-null the
// exploration data is written there instead of a discarded scratch buffer;
// the pendulum tasks reuse it to seed model training, since their first
// screened episodes alone cover far too little of the state box for the
// ensemble to predict sanely off-trajectory.
BootstrapResult bootstrap_initial_policy(const TaskSpec& task,
                                         const RunConfig& cfg, Rng& rng,
                                         ReplayBuffer* keep_transitions =
                                             nullptr);

// Model pretraining for the cartpole tasks: noisy rollouts of the initial
// policy, discarding (and redrawing) any trajectory that violates, then
// ensemble training on the collected buffer. Returns the transition count.
int bootstrap_initial_model(const TaskSpec& task,
                            const SquashedGaussianPolicy& policy,
                            const RunConfig& cfg, EnsembleDynamics& ens,
                            ReplayBuffer& buf, Rng& rng);

// Fixed quadratic-energy barrier for the ablation runs:
// h = 1 - (theta/theta_max)^2 - c (theta_dot/thd_ref)^2. Pendulum tasks
// only; it carries no invariance guarantee (that is the point of the
// ablation).
struct HandcraftedBarrier final : StateValueFn {
  double theta_max = 1.5, c = 1.0, thd_ref = 8.0;
  double value(const Vec& s) const override;
  double value_grad(const Vec& s, Vec& grad) const override;
};
HandcraftedBarrier handcrafted_certificate(const TaskSpec& task,
                                           const RunConfig& cfg);

struct RunResult {
  std::vector<EpochReport> reports;
  std::uint64_t crabs_violations = 0;
  std::uint64_t bootstrap_violations = 0;
  bool aborted = false;          // violation during CRABS-phase collection
  std::string abort_reason;
  double final_eval_return = 0.0;
  int bootstrap_checkpoint = -1;
  bool resumed = false;
};

// The full pipeline: bootstrap policy (and, for cartpole tasks, pretrain the
// model), then per epoch collect -> model -> certificate -> policy. Writes
// config.json, metrics.jsonl, trajectories/, per-epoch checkpoints/, a
// rolling state.bin for resumption, and final_report.json under
// cfg.out_dir. With `resume` set and a state.bin present, continues an
// interrupted run and reproduces the uninterrupted reports bit-exactly.
// `stop_after` >= 0 ends the call after that many completed epochs, leaving
// the run directory exactly as an interruption would.
RunResult run(const RunConfig& cfg, bool resume = false, int stop_after = -1);

// Deterministic full-horizon rollout without screening; used for
// evaluation and for epoch-0 pendulum collection (before any model exists,
// the bootstrap-certified deterministic policy is the only safe actor).
ShieldedRollout deterministic_episode(const TaskSpec& task, const PolicyFn& pi);

}  // namespace crabs
