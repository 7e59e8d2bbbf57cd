#include "crabs/policy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace crabs {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)

// log(1 - tanh(u)^2) without catastrophic cancellation for large |u|.
double log_one_minus_tanh_sq(double u) {
  return 2.0 * (std::log(2.0) - u - softplus(-2.0 * u));
}

void concat_into(const Vec& s, const Vec& a, Vec& x) {
  x.assign(s.begin(), s.end());
  x.insert(x.end(), a.begin(), a.end());
}

double q_forward(const Mlp& q, const Vec& s, const Vec& a, Workspace& ws,
                 Vec& xbuf) {
  concat_into(s, a, xbuf);
  return q.forward(xbuf, ws)[0];
}

void rng_to_writer(const Rng& rng, ByteWriter& w) {
  for (auto word : rng.s) w.u64(word);
}
void rng_from_reader(Rng& rng, ByteReader& r) {
  for (auto& word : rng.s) word = r.u64();
}

// Shared tail of sampling: given mu/logstd/zeta, fill u, a, log_prob.
void finish_sample(ActionSample& out) {
  const std::size_t n = out.mu.size();
  out.u.resize(n);
  out.a.resize(n);
  out.log_prob = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    double sigma = std::exp(out.logstd[k]);
    double u = out.mu[k] + sigma * out.zeta[k];
    out.u[k] = u;
    out.a[k] = std::tanh(u);
    out.log_prob += -0.5 * kLog2Pi - out.logstd[k] -
                    0.5 * out.zeta[k] * out.zeta[k] - log_one_minus_tanh_sq(u);
  }
}

}  // namespace

SquashedGaussianPolicy SquashedGaussianPolicy::make(int sdim, int adim,
                                                    const std::vector<int>& hidden,
                                                    std::uint64_t seed) {
  std::vector<int> sizes{sdim};
  for (int hsz : hidden) sizes.push_back(hsz);
  sizes.push_back(adim);
  SquashedGaussianPolicy pi;
  pi.mean_net = Mlp(sizes, Activation::swish);
  pi.logstd_net = Mlp(sizes, Activation::swish);
  Rng rng(seed);
  pi.mean_net.init(rng);
  pi.logstd_net.init(rng);
  return pi;
}

void SquashedGaussianPolicy::act(const Vec& s, Vec& a) const {
  const Vec& mu = mean_net.forward(s, ws_mean);
  a.resize(mu.size());
  for (std::size_t k = 0; k < mu.size(); ++k) a[k] = std::tanh(mu[k]);
}

void SquashedGaussianPolicy::act_vjp(const Vec& s, const Vec& w,
                                     Vec& grad) const {
  const Vec& mu = mean_net.forward(s, ws_mean);
  Vec up(mu.size());
  for (std::size_t k = 0; k < mu.size(); ++k) {
    double t = std::tanh(mu[k]);
    up[k] = w[k] * (1.0 - t * t);
  }
  Vec gin(s.size());
  mean_net.backward(ws_mean, up, nullptr, gin.data());
  for (std::size_t i = 0; i < s.size(); ++i) grad[i] += gin[i];
}

void SquashedGaussianPolicy::heads(const Vec& s, Vec& mu, Vec& logstd) const {
  mu = mean_net.forward(s, ws_mean);
  logstd = logstd_net.forward(s, ws_std);
  for (auto& v : logstd) v = clip(v, logstd_lo, logstd_hi);
}

void sample_exploration(const SquashedGaussianPolicy& pi, const Vec& s,
                        Rng& rng, ActionSample& out) {
  pi.heads(s, out.mu, out.logstd);
  out.zeta.resize(out.mu.size());
  for (auto& z : out.zeta) z = rng.normal();
  finish_sample(out);
}

void replay_exploration(const SquashedGaussianPolicy& pi, const Vec& s,
                        const Vec& zeta, ActionSample& out) {
  pi.heads(s, out.mu, out.logstd);
  out.zeta = zeta;
  finish_sample(out);
}

void action_backward(const SquashedGaussianPolicy& pi, const Vec& s,
                     const ActionSample& smp, double dlogp, const Vec* da,
                     Vec* gmean, Vec* glogstd) {
  // Re-run the forwards so the workspaces match this state regardless of
  // what ran in between.
  pi.mean_net.forward(s, pi.ws_mean);
  const Vec& raw = pi.logstd_net.forward(s, pi.ws_std);

  const std::size_t n = smp.u.size();
  Vec up_mean(n), up_std(n);
  for (std::size_t k = 0; k < n; ++k) {
    double t = std::tanh(smp.u[k]);
    double dadu = 1.0 - t * t;
    double dak = da ? (*da)[k] : 0.0;
    double sigma = std::exp(smp.logstd[k]);
    up_mean[k] = dlogp * 2.0 * t + dak * dadu;
    bool inside = raw[k] > pi.logstd_lo && raw[k] < pi.logstd_hi;
    up_std[k] = inside ? (dlogp * (-1.0 + 2.0 * t * sigma * smp.zeta[k]) +
                          dak * dadu * sigma * smp.zeta[k])
                       : 0.0;
  }
  if (gmean) pi.mean_net.backward(pi.ws_mean, up_mean, gmean->data(), nullptr);
  if (glogstd)
    pi.logstd_net.backward(pi.ws_std, up_std, glogstd->data(), nullptr);
}

SacState SacState::make(int sdim, int adim, const std::vector<int>& hidden,
                        const SquashedGaussianPolicy& pi, const SacConfig& cfg,
                        std::uint64_t seed) {
  SacState sac;
  sac.cfg = cfg;
  if (std::isnan(sac.cfg.target_entropy)) sac.cfg.target_entropy = -double(adim);

  std::vector<int> qsizes{sdim + adim};
  for (int hsz : hidden) qsizes.push_back(hsz);
  qsizes.push_back(1);
  sac.q1 = Mlp(qsizes, Activation::swish);
  sac.q2 = Mlp(qsizes, Activation::swish);
  Rng rng(seed);
  sac.q1.init(rng);
  sac.q2.init(rng);
  sac.tq1 = sac.q1;
  sac.tq2 = sac.q2;

  sac.log_alpha = std::log(sac.cfg.init_alpha);
  sac.adam_q1.init(std::size_t(sac.q1.param_count()), sac.cfg.lr, 0.0);
  sac.adam_q2.init(std::size_t(sac.q2.param_count()), sac.cfg.lr, 0.0);
  sac.adam_mean.init(std::size_t(pi.mean_net.param_count()), sac.cfg.lr, 0.0);
  sac.adam_logstd.init(std::size_t(pi.logstd_net.param_count()), sac.cfg.lr,
                       0.0);
  sac.adam_alpha.init(1, sac.cfg.lr, 0.0);
  sac.rng = rng.fork(1);
  return sac;
}

PolicyLossStats policy_loss(const SquashedGaussianPolicy& pi,
                            const SacState& sac, const SafetyOp& op,
                            const ReplayBuffer& buf,
                            const std::vector<std::size_t>& idx, Rng& rng,
                            Vec* gmean, Vec* glogstd) {
  PolicyLossStats st;
  const double inv_b = 1.0 / double(idx.size());
  const double alpha = sac.alpha();
  const std::size_t adim = std::size_t(pi.action_dim());

  Workspace wsq;
  ActionSample smp;
  Vec ga(adim), da(adim), x;
  const Vec one{1.0};

  for (std::size_t i : idx) {
    const Vec& s = buf.data[i].s;
    sample_exploration(pi, s, rng, smp);
    double uv = op.grad_action(s, smp.a, ga);

    double qhat;
    if (uv <= 0.0) {
      concat_into(s, smp.a, x);
      qhat = sac.q1.forward(x, wsq)[0];
      if (gmean || glogstd) {
        Vec gin(x.size());
        sac.q1.backward(wsq, one, nullptr, gin.data());
        for (std::size_t k = 0; k < adim; ++k)
          da[k] = -inv_b * gin[s.size() + k];
      }
    } else {
      ++st.uncertified;
      qhat = -(sac.cfg.c_penalty + uv);
      for (std::size_t k = 0; k < adim; ++k) da[k] = inv_b * ga[k];
    }
    st.loss += inv_b * (alpha * smp.log_prob - qhat);
    st.mean_u += inv_b * uv;
    if (gmean || glogstd)
      action_backward(pi, s, smp, alpha * inv_b, &da, gmean, glogstd);
  }
  return st;
}

QLossStats q_loss(const SquashedGaussianPolicy& pi, const SacState& sac,
                  const SafetyOp& op, const ReplayBuffer& buf,
                  const std::vector<std::size_t>& idx, Rng& rng, Vec* gq1,
                  Vec* gq2) {
  QLossStats st;
  ActionSample smp;
  Workspace ws;
  Vec ap, x;

  struct Target {
    std::size_t i;
    double y;
  };
  std::vector<Target> kept;
  kept.reserve(idx.size());

  for (std::size_t i : idx) {
    const Transition& t = buf.data[i];
    double y = t.r;
    if (!t.done) {
      // Rejection-sample a certified successor action; the deterministic
      // action is the fallback, and an entirely blocked state is dropped.
      bool have = false;
      for (int d = 0; d < sac.cfg.resample_cap && !have; ++d) {
        sample_exploration(pi, t.next, rng, smp);
        ++st.draws;
        if (op.eval(t.next, smp.a).u <= 0.0) {
          ap = smp.a;
          have = true;
        }
      }
      if (!have) {
        pi.act(t.next, ap);
        if (op.eval(t.next, ap).u <= 0.0) {
          have = true;
          ++st.fallbacks;
        }
      }
      if (!have) {
        ++st.dropped;
        continue;
      }
      double t1 = q_forward(sac.tq1, t.next, ap, ws, x);
      double t2 = q_forward(sac.tq2, t.next, ap, ws, x);
      y += sac.cfg.gamma * std::min(t1, t2);
    }
    kept.push_back({i, y});
  }

  st.kept = int(kept.size());
  if (kept.empty()) return st;
  const double inv_b = 1.0 / double(kept.size());

  for (const auto& kv : kept) {
    const Transition& t = buf.data[kv.i];
    concat_into(t.s, t.a, x);
    double e1 = sac.q1.forward(x, ws)[0] - kv.y;
    st.loss1 += inv_b * e1 * e1;
    if (gq1) {
      Vec up{2.0 * inv_b * e1};
      sac.q1.backward(ws, up, gq1->data(), nullptr);
    }
    double e2 = sac.q2.forward(x, ws)[0] - kv.y;
    st.loss2 += inv_b * e2 * e2;
    if (gq2) {
      Vec up{2.0 * inv_b * e2};
      sac.q2.backward(ws, up, gq2->data(), nullptr);
    }
  }
  return st;
}

double alpha_loss(const SquashedGaussianPolicy& pi, const SacState& sac,
                  const ReplayBuffer& buf, const std::vector<std::size_t>& idx,
                  Rng& rng, double* galpha) {
  const double inv_b = 1.0 / double(idx.size());
  double mean_lp = 0.0;
  ActionSample smp;
  for (std::size_t i : idx) {
    sample_exploration(pi, buf.data[i].s, rng, smp);
    mean_lp += inv_b * smp.log_prob;
  }
  double loss = -sac.alpha() * (mean_lp + sac.cfg.target_entropy);
  // d/dlog_alpha of -exp(log_alpha) * gap is the loss itself.
  if (galpha) *galpha = loss;
  return loss;
}

double adversarial_policy_grad(const SquashedGaussianPolicy& pi,
                               const SafetyOp& op,
                               const std::vector<Vec>& candidates, Vec& gmean,
                               CStarResult* cs_out) {
  CStarResult cs = c_star(op, pi, candidates);
  if (cs_out) *cs_out = cs;
  if (cs.empty_certified) return 0.0;

  const double w = 1.0 / double(cs.band.size());
  const std::size_t adim = std::size_t(pi.action_dim());
  Vec a(adim), ga(adim), up(adim);
  for (int ci : cs.band) {
    const Vec& s = candidates[std::size_t(ci)];
    const Vec& mu = pi.mean_net.forward(s, pi.ws_mean);
    for (std::size_t k = 0; k < adim; ++k) a[k] = std::tanh(mu[k]);
    op.grad_action(s, a, ga);
    // The barrier term in U has no policy dependence, so only the action
    // path contributes: chain d a / d mean through the squash.
    for (std::size_t k = 0; k < adim; ++k)
      up[k] = w * ga[k] * (1.0 - a[k] * a[k]);
    pi.mean_net.backward(pi.ws_mean, up, gmean.data(), nullptr);
  }
  return cs.value;
}

double adversarial_policy_step(SquashedGaussianPolicy& pi, const SafetyOp& op,
                               const std::vector<Vec>& candidates,
                               AdamState& adam) {
  Vec g(pi.mean_net.params.size(), 0.0);
  CStarResult cs;
  double value = adversarial_policy_grad(pi, op, candidates, g, &cs);
  if (cs.empty_certified) return value;
  adam.step(pi.mean_net.params, g);
  return value;
}

SacEpochStats sac_epoch(SquashedGaussianPolicy& pi, SacState& sac,
                        const SafetyOp& op, ReplayBuffer& buf, int steps,
                        CandidateSet* cands, const TargetDensity* adv_target,
                        const Vec* cert_s0) {
  SacEpochStats st;
  if (steps <= 0) return st;
  if (cands && (!adv_target || !cert_s0))
    throw std::invalid_argument(
        "adversarial candidates require a target density and an anchor state");

  std::vector<std::size_t> idx;
  Vec gmean(pi.mean_net.params.size());
  Vec glogstd(pi.logstd_net.params.size());
  Vec gq1(sac.q1.params.size()), gq2(sac.q2.params.size());
  const double inv_steps = 1.0 / double(steps);

  for (int t = 0; t < steps; ++t) {
    buf.sample_indices(sac.rng, std::size_t(sac.cfg.batch), idx);

    std::fill(gmean.begin(), gmean.end(), 0.0);
    std::fill(glogstd.begin(), glogstd.end(), 0.0);
    auto ps = policy_loss(pi, sac, op, buf, idx, sac.rng, &gmean, &glogstd);
    sac.adam_mean.step(pi.mean_net.params, gmean);
    sac.adam_logstd.step(pi.logstd_net.params, glogstd);
    st.mean_policy_loss += inv_steps * ps.loss;

    std::fill(gq1.begin(), gq1.end(), 0.0);
    std::fill(gq2.begin(), gq2.end(), 0.0);
    auto qs = q_loss(pi, sac, op, buf, idx, sac.rng, &gq1, &gq2);
    if (qs.kept > 0) {
      sac.adam_q1.step(sac.q1.params, gq1);
      sac.adam_q2.step(sac.q2.params, gq2);
    }
    st.mean_q_loss += inv_steps * 0.5 * (qs.loss1 + qs.loss2);
    st.dropped += std::uint64_t(qs.dropped);
    st.fallbacks += std::uint64_t(qs.fallbacks);
    sac.resample_draws += std::uint64_t(qs.draws);
    sac.fallback_targets += std::uint64_t(qs.fallbacks);
    sac.dropped_targets += std::uint64_t(qs.dropped);

    double ga = 0.0;
    alpha_loss(pi, sac, buf, idx, sac.rng, &ga);
    Vec la{sac.log_alpha}, gav{ga};
    sac.adam_alpha.step(la, gav);
    sac.log_alpha = la[0];
    st.mean_alpha += inv_steps * sac.alpha();

    if (cands && t % sac.cfg.adversarial_stride == 0) {
      refresh_candidates(*cands, *adv_target, *op.h, *cert_s0,
                         sac.cfg.mala_steps);
      st.last_c_star =
          adversarial_policy_step(pi, op, cands->states, sac.adam_mean);
    }

    const double rate = sac.cfg.target_update_rate;
    for (std::size_t i = 0; i < sac.q1.params.size(); ++i)
      sac.tq1.params[i] += rate * (sac.q1.params[i] - sac.tq1.params[i]);
    for (std::size_t i = 0; i < sac.q2.params.size(); ++i)
      sac.tq2.params[i] += rate * (sac.q2.params[i] - sac.tq2.params[i]);
  }
  return st;
}

void policy_to_writer(const SquashedGaussianPolicy& pi, ByteWriter& w) {
  w.magic("CRABSPOL");
  w.u32(1);
  net_to_writer(pi.mean_net, w);
  net_to_writer(pi.logstd_net, w);
  w.f64(pi.logstd_lo);
  w.f64(pi.logstd_hi);
}

SquashedGaussianPolicy policy_from_reader(ByteReader& r) {
  r.expect_magic("CRABSPOL");
  if (r.u32() != 1) throw std::runtime_error("unsupported policy version");
  SquashedGaussianPolicy pi;
  pi.mean_net = net_from_reader(r);
  pi.logstd_net = net_from_reader(r);
  pi.logstd_lo = r.f64();
  pi.logstd_hi = r.f64();
  return pi;
}

void sac_to_writer(const SacState& sac, ByteWriter& w) {
  w.magic("CRABSSAC");
  w.u32(1);
  net_to_writer(sac.q1, w);
  net_to_writer(sac.q2, w);
  net_to_writer(sac.tq1, w);
  net_to_writer(sac.tq2, w);
  w.f64(sac.log_alpha);
  adam_to_writer(sac.adam_q1, w);
  adam_to_writer(sac.adam_q2, w);
  adam_to_writer(sac.adam_mean, w);
  adam_to_writer(sac.adam_logstd, w);
  adam_to_writer(sac.adam_alpha, w);
  rng_to_writer(sac.rng, w);
  w.u64(sac.resample_draws);
  w.u64(sac.fallback_targets);
  w.u64(sac.dropped_targets);
}

void sac_from_reader(SacState& sac, ByteReader& r) {
  r.expect_magic("CRABSSAC");
  if (r.u32() != 1) throw std::runtime_error("unsupported sac state version");
  sac.q1 = net_from_reader(r);
  sac.q2 = net_from_reader(r);
  sac.tq1 = net_from_reader(r);
  sac.tq2 = net_from_reader(r);
  sac.log_alpha = r.f64();
  adam_from_reader(sac.adam_q1, r);
  adam_from_reader(sac.adam_q2, r);
  adam_from_reader(sac.adam_mean, r);
  adam_from_reader(sac.adam_logstd, r);
  adam_from_reader(sac.adam_alpha, r);
  rng_from_reader(sac.rng, r);
  sac.resample_draws = r.u64();
  sac.fallback_targets = r.u64();
  sac.dropped_targets = r.u64();
}

}  // namespace crabs
