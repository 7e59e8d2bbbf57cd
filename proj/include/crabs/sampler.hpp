#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "crabs/common.hpp"
#include "crabs/interfaces.hpp"
#include "crabs/rng.hpp"
#include "crabs/serialize.hpp"

namespace crabs {

// Unnormalized log density with gradient. If box_lo/hi are non-empty the
// support is truncated to the box: proposals outside are rejected, which
// keeps the chain exact on the restricted domain.
struct TargetDensity {
  std::function<double(const Vec&)> log_p;
  std::function<double(const Vec&, Vec&)> log_p_grad;
  Vec box_lo, box_hi;

  bool in_box(const Vec& x) const {
    for (std::size_t i = 0; i < box_lo.size(); ++i)
      if (x[i] < box_lo[i] || x[i] > box_hi[i]) return false;
    return true;
  }
};

// m independent chains sharing one step size and one RNG stream.
struct CandidateSet {
  std::vector<Vec> states;
  Vec cached_log_p;
  std::vector<Vec> cached_grad;
  std::vector<std::uint8_t> cache_valid;

  double tau = 1e-3;
  double tau_min = 1e-6, tau_max = 1.0;
  double target_accept = 0.6;

  static constexpr std::size_t kWindow = 500;
  std::vector<std::uint8_t> accept_ring;
  std::size_t ring_pos = 0;
  std::size_t ring_count = 0;

  std::uint64_t proposals = 0, accepted = 0, nonfinite_rejected = 0;
  std::uint64_t projections = 0, reseeds = 0;
  Rng rng;

  void init(int m, const Vec& lo, const Vec& hi, Rng r);
  int size() const { return int(states.size()); }
  void push_accept(bool a);
  int window_count() const { return int(ring_count); }
  double window_rate() const;
};

// One Metropolis-adjusted Langevin transition for chain i: proposal
// x + tau * grad log p(x) + sqrt(2 tau) * N(0, I), accepted with probability
// min(1, p(y) q(x|y) / (p(x) q(y|x))). Non-finite proposals or target values
// auto-reject and are counted.
void mala_chain_step(CandidateSet& set, const TargetDensity& target, int i);

// Backtracking gradient ascent on h until h >= 0, at most 50 steps; a stuck
// chain is reseeded at s0. Returns whether the chain ends certified.
bool project_to_certified(CandidateSet& set, const StateValueFn& h,
                          const Vec& s0, int i);

// Project escaped chains, advance every chain `steps` transitions against
// the current target (caches are recomputed first), then adapt tau.
void refresh_candidates(CandidateSet& set, const TargetDensity& target,
                        const StateValueFn& h, const Vec& s0, int steps);

// Multiplicative controller toward ~0.6 acceptance: x1.1 above 0.65, x0.9
// below 0.55, clamped to [tau_min, tau_max]; needs >= 100 window entries.
double adapt_step_size(CandidateSet& set);

void candidates_to_writer(const CandidateSet& set, ByteWriter& w);
void candidates_from_reader(CandidateSet& set, ByteReader& r);

}  // namespace crabs
