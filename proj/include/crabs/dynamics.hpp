#pragma once

#include <vector>

#include "crabs/buffer.hpp"
#include "crabs/env.hpp"
#include "crabs/interfaces.hpp"
#include "crabs/mlp.hpp"

namespace crabs {

// Per-feature standardization of the (state, action) input, fitted once per
// training round and frozen so gradients stay consistent within a round.
struct Normalizer {
  Vec mean, stdev;

  void identity(int dim) {
    mean.assign(std::size_t(dim), 0.0);
    stdev.assign(std::size_t(dim), 1.0);
  }
  void fit(const ReplayBuffer& buf);
  void apply(const Vec& s, const Vec& a, Vec& out) const;
};

// raw log-variance pulled softly inside [mn, mx]; saturates smoothly and
// may overshoot mx by at most e^-(mx - mn).
double clamp_logvar(double raw, double mx, double mn);

// Negative log density of `target` under N(mu, diag e^lv), summed over dims.
double gaussian_nll(const Vec& mu, const Vec& lv, const Vec& target);

// One Gaussian dynamics model: trunk maps the normalized (s, a) to a state
// delta mean and a raw per-dimension log-variance; the log-variance is kept
// inside learnable bounds by soft clamping.
struct ProbabilisticModel {
  Mlp trunk;           // in: sdim + adim, out: 2 * sdim
  Vec lv_max, lv_min;  // learnable bounds, one pair per state dimension
  AdamState adam_trunk, adam_max, adam_min;
  Rng rng;             // private mini-batch stream
  mutable Workspace ws;
};

// Per-step training NLL of each member, for monitoring.
struct NllTrace {
  std::vector<std::vector<double>> member_nll;
};

// K-member ensemble; the confidence region is the set of member means.
// Predictions are projected onto the state space's hard coordinate range
// (clip_lo/hi, infinite where unbounded): the simulator itself saturates
// there, so anything outside is unreachable and only misleads the barrier.
struct EnsembleDynamics final : ConfidenceModel {
  std::vector<ProbabilisticModel> nets;
  Normalizer norm;
  int sdim = 0, adim = 0;
  double bound_penalty = 0.01;  // weight on sum(lv_max - lv_min)
  Vec clip_lo, clip_hi;         // empty: no projection

  static EnsembleDynamics make(int k, int sdim, int adim,
                               const std::vector<int>& hidden,
                               std::uint64_t seed);
  static EnsembleDynamics make_for_task(const TaskSpec& task, int k,
                                        const std::vector<int>& hidden,
                                        std::uint64_t seed);

  int members() const override { return int(nets.size()); }
  int state_dim() const override { return sdim; }
  void region(const Vec& s, const Vec& a, std::vector<Vec>& out) const override;
  void mean_vjp(int k, const Vec& s, const Vec& a, const Vec& v, Vec& gs,
                Vec& ga) const override;
  // mean next state of member k: s + predicted delta
  void predict(int k, const Vec& s, const Vec& a, Vec& next) const;
};

// Mean NLL of member k over the indexed transitions plus the bound-tightness
// penalty. Non-null gradient buffers accumulate; a non-finite per-sample
// loss aborts with the buffer index of the offending transition.
double member_nll(const EnsembleDynamics& ens, int k, const ReplayBuffer& buf,
                  const std::vector<std::size_t>& idx, Vec* gtrunk, Vec* gmax,
                  Vec* gmin);

// `steps` Adam updates per member (lr 1e-3, weight decay 7.5e-5), each member
// drawing its own mini-batches; the normalizer is refitted and frozen first.
void train_ensemble(EnsembleDynamics& ens, const ReplayBuffer& buf, int steps,
                    int batch_size = 256, NllTrace* trace = nullptr);

// Max pairwise distance among member predictions at the zero action.
double uncertainty(const ConfidenceModel& model, const Vec& s, int action_dim);

// Fraction of transitions whose true next state lies inside the bounding box
// of member means inflated by `slack` per dimension.
double coverage(const ConfidenceModel& model,
                const std::vector<Transition>& transitions, double slack);

// The analytic simulator exposed as a one-member confidence region; used to
// bootstrap training before any data exists and to isolate certification
// machinery from model error in tests.
struct ExactDynamics final : ConfidenceModel {
  TaskSpec task;
  explicit ExactDynamics(TaskSpec t) : task(std::move(t)) {}

  int members() const override { return 1; }
  int state_dim() const override { return task.state_dim; }
  void region(const Vec& s, const Vec& a, std::vector<Vec>& out) const override {
    out.assign(1, step_state(task, s, a));
  }
  void mean_vjp(int, const Vec& s, const Vec& a, const Vec& v, Vec& gs,
                Vec& ga) const override;
};

void ens_to_writer(const EnsembleDynamics& ens, ByteWriter& w);
EnsembleDynamics ens_from_reader(ByteReader& r);

}  // namespace crabs
