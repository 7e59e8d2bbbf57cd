#include "crabs/sampler.hpp"

#include <cmath>

namespace crabs {

void CandidateSet::init(int m, const Vec& lo, const Vec& hi, Rng r) {
  rng = r;
  states.assign(std::size_t(m), Vec(lo.size()));
  for (auto& s : states)
    for (std::size_t d = 0; d < lo.size(); ++d) s[d] = rng.uniform(lo[d], hi[d]);
  cached_log_p.assign(std::size_t(m), 0.0);
  cached_grad.assign(std::size_t(m), Vec(lo.size(), 0.0));
  cache_valid.assign(std::size_t(m), 0);
  accept_ring.assign(kWindow, 0);
  ring_pos = ring_count = 0;
  proposals = accepted = nonfinite_rejected = projections = reseeds = 0;
}

void CandidateSet::push_accept(bool a) {
  accept_ring[ring_pos] = a ? 1 : 0;
  ring_pos = (ring_pos + 1) % kWindow;
  if (ring_count < kWindow) ++ring_count;
}

double CandidateSet::window_rate() const {
  if (ring_count == 0) return 0.0;
  std::size_t s = 0;
  for (std::size_t i = 0; i < ring_count; ++i) s += accept_ring[i];
  return double(s) / double(ring_count);
}

void mala_chain_step(CandidateSet& set, const TargetDensity& target, int i) {
  Vec& x = set.states[std::size_t(i)];
  std::size_t dim = x.size();
  if (!set.cache_valid[std::size_t(i)]) {
    set.cached_grad[std::size_t(i)].resize(dim);
    set.cached_log_p[std::size_t(i)] =
        target.log_p_grad(x, set.cached_grad[std::size_t(i)]);
    set.cache_valid[std::size_t(i)] = 1;
  }
  double lp_x = set.cached_log_p[std::size_t(i)];
  const Vec& g_x = set.cached_grad[std::size_t(i)];

  double tau = set.tau;
  double root = std::sqrt(2.0 * tau);
  Vec y(dim);
  double zz = 0.0;  // |zeta|^2, gives log q(y|x) = -|zeta|^2 / 2 exactly
  for (std::size_t d = 0; d < dim; ++d) {
    double z = set.rng.normal();
    zz += z * z;
    y[d] = x[d] + tau * g_x[d] + root * z;
  }
  double u = set.rng.uniform();  // drawn unconditionally: fixed stream shape
  ++set.proposals;

  if (!all_finite(y) || (!target.box_lo.empty() && !target.in_box(y))) {
    if (!all_finite(y)) ++set.nonfinite_rejected;
    set.push_accept(false);
    return;
  }
  Vec g_y(dim);
  double lp_y = target.log_p_grad(y, g_y);
  if (!std::isfinite(lp_y) || !all_finite(g_y)) {
    ++set.nonfinite_rejected;
    set.push_accept(false);
    return;
  }
  // log q(x|y) = -|x - y - tau * grad(y)|^2 / (4 tau)
  double back = 0.0;
  for (std::size_t d = 0; d < dim; ++d) {
    double r = x[d] - y[d] - tau * g_y[d];
    back += r * r;
  }
  double log_alpha = lp_y - lp_x - back / (4.0 * tau) + zz / 2.0;
  bool accept = log_alpha >= 0.0 || u < std::exp(log_alpha);
  if (accept) {
    x = y;
    set.cached_log_p[std::size_t(i)] = lp_y;
    set.cached_grad[std::size_t(i)] = g_y;
    ++set.accepted;
  }
  set.push_accept(accept);
}

bool project_to_certified(CandidateSet& set, const StateValueFn& h,
                          const Vec& s0, int i) {
  Vec& x = set.states[std::size_t(i)];
  Vec g(x.size());
  double v = h.value_grad(x, g);
  if (v >= 0.0) return true;
  ++set.projections;
  Vec trial(x.size());
  for (int it = 0; it < 50 && v < 0.0; ++it) {
    double gn2 = dot(g, g);
    if (gn2 < 1e-24) break;  // flat: no direction to climb
    double eta = 2.0 * (-v) / gn2;  // aim past the zero crossing
    bool moved = false;
    for (int bt = 0; bt < 24; ++bt) {
      for (std::size_t d = 0; d < x.size(); ++d) trial[d] = x[d] + eta * g[d];
      double vt = h.value(trial);
      if (std::isfinite(vt) && vt > v) {
        x = trial;
        v = h.value_grad(x, g);
        moved = true;
        break;
      }
      eta *= 0.5;
    }
    if (!moved) break;
  }
  set.cache_valid[std::size_t(i)] = 0;
  if (v >= 0.0) return true;
  x = s0;
  ++set.reseeds;
  return h.value(x) >= 0.0;
}

void refresh_candidates(CandidateSet& set, const TargetDensity& target,
                        const StateValueFn& h, const Vec& s0, int steps) {
  for (int i = 0; i < set.size(); ++i) {
    if (h.value(set.states[std::size_t(i)]) < 0.0)
      project_to_certified(set, h, s0, i);
    // the certificate or policy behind the target moved since last refresh
    set.cache_valid[std::size_t(i)] = 0;
    for (int s = 0; s < steps; ++s) mala_chain_step(set, target, i);
  }
  adapt_step_size(set);
}

double adapt_step_size(CandidateSet& set) {
  if (set.window_count() >= 100) {
    double rate = set.window_rate();
    if (rate > 0.65)
      set.tau *= 1.1;
    else if (rate < 0.55)
      set.tau *= 0.9;
    set.tau = clip(set.tau, set.tau_min, set.tau_max);
  }
  return set.tau;
}

void candidates_to_writer(const CandidateSet& set, ByteWriter& w) {
  w.u64(set.states.size());
  w.u64(set.states.empty() ? 0 : set.states[0].size());
  for (const auto& s : set.states)
    for (double x : s) w.f64(x);
  w.f64(set.tau);
  w.f64(set.tau_min);
  w.f64(set.tau_max);
  w.f64(set.target_accept);
  for (auto b : set.accept_ring) w.u8(b);
  w.u64(set.ring_pos);
  w.u64(set.ring_count);
  w.u64(set.proposals);
  w.u64(set.accepted);
  w.u64(set.nonfinite_rejected);
  w.u64(set.projections);
  w.u64(set.reseeds);
  for (auto word : set.rng.s) w.u64(word);
}

void candidates_from_reader(CandidateSet& set, ByteReader& r) {
  std::uint64_t m = r.u64(), dim = r.u64();
  set.states.assign(m, Vec(dim));
  for (auto& s : set.states)
    for (auto& x : s) x = r.f64();
  set.tau = r.f64();
  set.tau_min = r.f64();
  set.tau_max = r.f64();
  set.target_accept = r.f64();
  set.accept_ring.assign(CandidateSet::kWindow, 0);
  for (auto& b : set.accept_ring) b = r.u8();
  set.ring_pos = r.u64();
  set.ring_count = r.u64();
  set.proposals = r.u64();
  set.accepted = r.u64();
  set.nonfinite_rejected = r.u64();
  set.projections = r.u64();
  set.reseeds = r.u64();
  for (auto& word : set.rng.s) word = r.u64();
  set.cached_log_p.assign(m, 0.0);
  set.cached_grad.assign(m, Vec(dim, 0.0));
  set.cache_valid.assign(m, 0);  // recomputed on the next refresh
}

}  // namespace crabs
