#pragma once

#include <vector>

#include "crabs/buffer.hpp"
#include "crabs/certificate.hpp"
#include "crabs/env.hpp"
#include "crabs/policy.hpp"

namespace crabs {

enum class ProposalSource { noisy_policy = 0, uniform_random = 1, extra_noisy = 2 };
const char* proposal_source_name(ProposalSource src);

struct ShieldConfig {
  int n_proposals = 100;
  double threshold = 0.0;         // accept a proposal when U(s, a) <= this
  double extra_noise_scale = 2.0; // std multiplier for extra_noisy proposals
};

// One exploration proposal: the policy's own noise, a uniform action-box
// draw, or the policy with its noise scale doubled.
void draw_proposal(const SquashedGaussianPolicy& pi, ProposalSource source,
                   const Vec& s, Rng& rng, double extra_scale, Vec& a);

struct ShieldedStep {
  Vec a;
  bool shielded = false;   // every proposal failed; the safeguard acted
  int proposals_tried = 0;
};

// Screen up to cfg.n_proposals exploration actions through the safety
// operator and return the first one with U <= threshold; otherwise fall back
// to the safeguard policy. The state must be certified — an uncertified
// state here is a caller bug.
ShieldedStep shielded_action(const SafetyOp& op, const PolicyFn& safeguard,
                             const SquashedGaussianPolicy& proposal,
                             ProposalSource source, const Vec& s, Rng& rng,
                             const ShieldConfig& cfg);

struct ShieldedRollout {
  std::vector<Transition> transitions;
  Vec h_at_state;             // barrier value at each visited state
  Vec u_at_action;            // U(s_t, a_t) for the action actually taken
  std::vector<bool> shielded; // per-step shield flag
  int shield_activations = 0;
  // Steps that began outside the certified set; the safeguard acts directly
  // there. Always zero when the certificate is genuinely invariant.
  int h_breaches = 0;
  ProposalSource source = ProposalSource::noisy_policy;
  bool violated = false;
  double total_reward = 0.0;
};

// Roll out from the task's start state until the horizon or a violation,
// screening every exploration action. The caller is responsible for having
// certified the safeguard policy against this operator beforehand.
ShieldedRollout collect_episode(const TaskSpec& task, const SafetyOp& op,
                                const PolicyFn& safeguard,
                                const SquashedGaussianPolicy& proposal,
                                ProposalSource source, Rng& rng,
                                const ShieldConfig& cfg);

// Per-epoch collection mix: the swing-up task gathers six episodes (two
// uniform-random, two on-policy, two extra-noise); every other task gathers
// a single on-policy episode.
std::vector<ProposalSource> episode_schedule(const TaskSpec& task);

}  // namespace crabs
