#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "crabs/buffer.hpp"
#include "crabs/certificate.hpp"
#include "crabs/interfaces.hpp"
#include "crabs/mlp.hpp"
#include "crabs/sampler.hpp"

namespace crabs {

// Barrier stand-in that certifies everything; lets the shared training loop
// run as plain SAC before a real certificate exists.
struct TrivialCertificate final : StateValueFn {
  double value(const Vec&) const override { return 1.0; }
  double value_grad(const Vec& s, Vec& grad) const override {
    grad.assign(s.size(), 0.0);
    return 1.0;
  }
};

// Deterministic action tanh(mean(s)); exploration action tanh(mean + std*z)
// with std = exp(logstd(s)), logstd hard-clamped to [logstd_lo, logstd_hi].
struct SquashedGaussianPolicy final : PolicyFn {
  Mlp mean_net, logstd_net;
  double logstd_lo = -5.0, logstd_hi = 2.0;
  mutable Workspace ws_mean, ws_std;

  static SquashedGaussianPolicy make(int sdim, int adim,
                                     const std::vector<int>& hidden,
                                     std::uint64_t seed);

  int action_dim() const override { return mean_net.out_dim(); }
  void act(const Vec& s, Vec& a) const override;
  void act_vjp(const Vec& s, const Vec& w, Vec& grad) const override;
  // mu and the clamped logstd at s
  void heads(const Vec& s, Vec& mu, Vec& logstd) const;
};

// One reparametrized draw: a = tanh(u), u = mu + exp(logstd) * zeta.
struct ActionSample {
  Vec a, u, zeta, mu, logstd;
  double log_prob = 0.0;
};

void sample_exploration(const SquashedGaussianPolicy& pi, const Vec& s,
                        Rng& rng, ActionSample& out);
// Deterministic replay of a draw with a fixed zeta (finite-difference probes).
void replay_exploration(const SquashedGaussianPolicy& pi, const Vec& s,
                        const Vec& zeta, ActionSample& out);

// Accumulates d(dlogp * log_prob + <da, a>) / d net params for the recorded
// draw into gmean / glogstd (either may be null).
void action_backward(const SquashedGaussianPolicy& pi, const Vec& s,
                     const ActionSample& smp, double dlogp, const Vec* da,
                     Vec* gmean, Vec* glogstd);

struct SacConfig {
  int batch = 128;
  double gamma = 0.99;
  double lr = 3e-4;
  double target_update_rate = 0.005;  // targets keep 0.995 of themselves
  double c_penalty = 3000.0;          // uncertified Q-hat offset
  // NaN means "use -action_dim"; resolved by SacState::make.
  double target_entropy = std::numeric_limits<double>::quiet_NaN();
  double init_alpha = 0.1;
  int resample_cap = 20;              // a' rejection draws per TD target
  int adversarial_stride = 1;         // adversarial step every n-th SAC step
  int mala_steps = 2;                 // chain steps per candidate refresh
};

struct SacState {
  Mlp q1, q2, tq1, tq2;
  double log_alpha = 0.0;
  AdamState adam_q1, adam_q2, adam_mean, adam_logstd, adam_alpha;
  Rng rng;
  SacConfig cfg;
  // TD-target bookkeeping
  std::uint64_t resample_draws = 0, fallback_targets = 0, dropped_targets = 0;

  double alpha() const { return std::exp(log_alpha); }
  static SacState make(int sdim, int adim, const std::vector<int>& hidden,
                       const SquashedGaussianPolicy& pi, const SacConfig& cfg,
                       std::uint64_t seed);
};

struct PolicyLossStats {
  double loss = 0.0;
  double mean_u = 0.0;
  int uncertified = 0;
};

// Eq-style actor objective: mean over the batch of
//   alpha * log pi(a|s) - Q-hat(s, a),  a reparametrized,
// with Q-hat = q1(s,a) when U(s,a) <= 0 and -(C + U(s,a)) otherwise.
// Gradients for the two policy nets accumulate into gmean/glogstd.
PolicyLossStats policy_loss(const SquashedGaussianPolicy& pi,
                            const SacState& sac, const SafetyOp& op,
                            const ReplayBuffer& buf,
                            const std::vector<std::size_t>& idx, Rng& rng,
                            Vec* gmean, Vec* glogstd);

struct QLossStats {
  double loss1 = 0.0, loss2 = 0.0;
  int kept = 0, dropped = 0, fallbacks = 0, draws = 0;
};

// Clipped double-Q TD regression toward r + gamma * min target-Q(s', a'),
// where a' is an exploration draw accepted only if U(s', a') <= 0: up to
// cfg.resample_cap draws, then the deterministic action if certified,
// otherwise the sample is dropped. Terminal transitions bootstrap nothing.
QLossStats q_loss(const SquashedGaussianPolicy& pi, const SacState& sac,
                  const SafetyOp& op, const ReplayBuffer& buf,
                  const std::vector<std::size_t>& idx, Rng& rng, Vec* gq1,
                  Vec* gq2);

// Temperature objective E[-alpha * (log pi(a|s) + target_entropy)]; returns
// loss, writes d loss / d log_alpha.
double alpha_loss(const SquashedGaussianPolicy& pi, const SacState& sac,
                  const ReplayBuffer& buf, const std::vector<std::size_t>& idx,
                  Rng& rng, double* galpha);

// acc += mean over the argmax band of d U(s*, pi(s*)) / d mean-net params;
// returns the C* value. The barrier constraint does not involve theta, so
// no multiplier term appears.
double adversarial_policy_grad(const SquashedGaussianPolicy& pi,
                               const SafetyOp& op,
                               const std::vector<Vec>& candidates, Vec& gmean,
                               CStarResult* cs_out = nullptr);

// One Adam step on the mean net against C*.
double adversarial_policy_step(SquashedGaussianPolicy& pi, const SafetyOp& op,
                               const std::vector<Vec>& candidates,
                               AdamState& adam);

struct SacEpochStats {
  double mean_policy_loss = 0.0, mean_q_loss = 0.0, mean_alpha = 0.0;
  double last_c_star = 0.0;
  std::uint64_t dropped = 0, fallbacks = 0;
};

// `steps` iterations of: one shared batch; actor update; critic update;
// temperature update; every cfg.adversarial_stride steps a candidate refresh
// plus adversarial actor step (skipped when cands is null); target nets move
// by cfg.target_update_rate toward the live critics.
SacEpochStats sac_epoch(SquashedGaussianPolicy& pi, SacState& sac,
                        const SafetyOp& op, ReplayBuffer& buf, int steps,
                        CandidateSet* cands, const TargetDensity* adv_target,
                        const Vec* cert_s0);

void policy_to_writer(const SquashedGaussianPolicy& pi, ByteWriter& w);
SquashedGaussianPolicy policy_from_reader(ByteReader& r);
void sac_to_writer(const SacState& sac, ByteWriter& w);
void sac_from_reader(SacState& sac, ByteReader& r);

}  // namespace crabs
