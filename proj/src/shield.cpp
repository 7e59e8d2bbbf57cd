#include "crabs/shield.hpp"

#include <cmath>
#include <stdexcept>

namespace crabs {

const char* proposal_source_name(ProposalSource src) {
  switch (src) {
    case ProposalSource::noisy_policy: return "noisy_policy";
    case ProposalSource::uniform_random: return "uniform_random";
    case ProposalSource::extra_noisy: return "extra_noisy";
  }
  return "unknown";
}

void draw_proposal(const SquashedGaussianPolicy& pi, ProposalSource source,
                   const Vec& s, Rng& rng, double extra_scale, Vec& a) {
  const std::size_t adim = std::size_t(pi.action_dim());
  a.resize(adim);
  if (source == ProposalSource::uniform_random) {
    for (auto& v : a) v = rng.uniform(-1.0, 1.0);
    return;
  }
  Vec mu, logstd;
  pi.heads(s, mu, logstd);
  const double scale = source == ProposalSource::extra_noisy ? extra_scale : 1.0;
  for (std::size_t k = 0; k < adim; ++k) {
    double u = mu[k] + scale * std::exp(logstd[k]) * rng.normal();
    a[k] = std::tanh(u);
  }
}

ShieldedStep shielded_action(const SafetyOp& op, const PolicyFn& safeguard,
                             const SquashedGaussianPolicy& proposal,
                             ProposalSource source, const Vec& s, Rng& rng,
                             const ShieldConfig& cfg) {
  if (op.h->value(s) < 0.0)
    throw std::invalid_argument(
        "shielded_action called on a state outside the certified set");
  ShieldedStep out;
  for (int i = 0; i < cfg.n_proposals; ++i) {
    draw_proposal(proposal, source, s, rng, cfg.extra_noise_scale, out.a);
    ++out.proposals_tried;
    if (op.eval(s, out.a).u <= cfg.threshold) return out;
  }
  safeguard.act(s, out.a);
  out.shielded = true;
  return out;
}

ShieldedRollout collect_episode(const TaskSpec& task, const SafetyOp& op,
                                const PolicyFn& safeguard,
                                const SquashedGaussianPolicy& proposal,
                                ProposalSource source, Rng& rng,
                                const ShieldConfig& cfg) {
  ShieldedRollout out;
  out.source = source;
  Vec s = initial_state(task);
  for (int t = 0; t < task.horizon; ++t) {
    double h_s = op.h->value(s);
    ShieldedStep step;
    if (h_s >= 0.0) {
      step = shielded_action(op, safeguard, proposal, source, s, rng, cfg);
    } else {
      // Outside the certified set nothing is screenable; the safeguard is
      // the best remaining option. Counted separately so audits see it.
      ++out.h_breaches;
      safeguard.act(s, step.a);
      step.shielded = true;
    }
    auto ev = op.eval(s, step.a);
    auto res = env_step(task, s, step.a);

    Transition tr;
    tr.s = s;
    tr.a = step.a;
    tr.next = res.next;
    tr.r = res.r;
    tr.done = res.violated || t + 1 == task.horizon;
    tr.safe = !res.violated;
    out.transitions.push_back(std::move(tr));
    out.h_at_state.push_back(h_s);
    out.u_at_action.push_back(ev.u);
    out.shielded.push_back(step.shielded);
    if (step.shielded) ++out.shield_activations;
    out.total_reward += res.r;

    s = res.next;
    if (res.violated) {
      out.violated = true;
      break;
    }
  }
  return out;
}

std::vector<ProposalSource> episode_schedule(const TaskSpec& task) {
  if (task.id == TaskId::swing)
    return {ProposalSource::uniform_random, ProposalSource::uniform_random,
            ProposalSource::noisy_policy,  ProposalSource::noisy_policy,
            ProposalSource::extra_noisy,   ProposalSource::extra_noisy};
  return {ProposalSource::noisy_policy};
}

}  // namespace crabs
