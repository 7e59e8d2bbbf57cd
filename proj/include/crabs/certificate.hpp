#pragma once

#include <functional>
#include <vector>

#include "crabs/env.hpp"
#include "crabs/interfaces.hpp"
#include "crabs/mlp.hpp"
#include "crabs/sampler.hpp"

namespace crabs {

// Differentiable unsafe indicator: zero on the safe set, > 1 once any
// constrained coordinate is more than 1% past its limit.
struct UnsafeField {
  std::function<double(const Vec&)> value;
  std::function<void(const Vec&, Vec&)> grad;  // overwrites
};

UnsafeField task_unsafe_field(const TaskSpec& task);

// Barrier h(s) = 1 - softplus(f(s) - f(s0)) - B(s). By construction
// h(s0) = 1 - log 2 - B(s0) and h(s) < 0 wherever B(s) > 1, so the
// certified set {h >= 0} always contains s0 and never touches unsafe
// states; training only has to shape the invariance property.
//
// With `b_init` set the anchor term generalizes to an initial-set weight:
// h(s) = 1 - softplus(f(s)) * (1 - B_init(s)) - B(s).
struct BarrierCertificate final : StateValueFn {
  Mlp f;
  Vec s0;
  UnsafeField unsafe;
  std::function<double(const Vec&)> b_init;            // empty: anchor at s0
  std::function<void(const Vec&, Vec&)> b_init_grad;   // optional, overwrites

  double f_s0 = 0.0;  // cached f(s0); refresh() after any parameter change
  mutable Workspace ws;

  void refresh();
  double value(const Vec& s) const override;
  double value_grad(const Vec& s, Vec& grad) const override;
  // acc += coeff * d h(s) / d params
  void add_param_grad(const Vec& s, double coeff, Vec& acc) const;
};

BarrierCertificate make_task_certificate(const TaskSpec& task,
                                         const std::vector<int>& hidden,
                                         std::uint64_t seed);

// Worst next-state evaluation of the barrier over the model's members.
struct UEval {
  double u = 0.0;
  int argmax = -1;
  Vec next;             // image of the worst member
  double h_next = 0.0;  // barrier value at that image
};

// U(s, a) = max_k -h(mu_k(s, a)) + alpha * h(s). U <= 0 certifies that the
// whole confidence region stays inside {h >= 0}; alpha > 0 additionally
// demands contraction toward the interior.
struct SafetyOp {
  const StateValueFn* h = nullptr;
  const ConfidenceModel* model = nullptr;
  double alpha = 0.0;

  UEval eval(const Vec& s, const Vec& a) const;
  // d U(s, pi(s)) / ds through both the model and the policy; overwrites gs,
  // returns the value.
  double grad_state_total(const Vec& s, const PolicyFn& pi, Vec& gs) const;
  // d U(s, a) / da at fixed s; overwrites ga, returns the value.
  double grad_action(const Vec& s, const Vec& a, Vec& ga) const;
};

struct CStarResult {
  double value = -1e300;
  int argmax = -1;            // index into the candidate list
  std::vector<int> band;      // candidates within 5% of the max (argmax first)
  Vec h_vals;                 // barrier value of every candidate
  bool empty_certified = true;
};

// Max of U(s, pi(s)) over the certified candidates {h(s) >= 0}. Candidates
// with h < 0 are skipped entirely; if none qualify the result is flagged.
CStarResult c_star(const SafetyOp& op, const PolicyFn& pi,
                   const std::vector<Vec>& candidates);

// Multiplier of the constraint h(s) >= 0 at a maximizer of U. Inactive
// (h > active_tol) gives 0; active gives |grad U| / |grad h|, and a flat
// active constraint gradient (|grad h| < 1e-12) is a numerical abort.
double kkt_multiplier(const Vec& grad_u, const Vec& grad_h, double h_at,
                      double active_tol = 1e-3);

// acc += d C* / d certificate params, averaged over the band, each term
// dU/dphi + nu* dh/dphi with nu* from the KKT split. Returns the largest
// multiplier seen (diagnostic).
double envelope_param_grad(const BarrierCertificate& cert, const SafetyOp& op,
                           const PolicyFn& pi, const std::vector<Vec>& candidates,
                           const CStarResult& cs, Vec& acc);

// Mean over candidates of relu(prev(s) - cert(s)): pressure against the
// certified set shrinking between consecutive certificates.
double growth_regularizer(const BarrierCertificate& cert, const StateValueFn& prev,
                          const std::vector<Vec>& candidates);
// Same value; acc += scale * d Reg / d params.
double growth_regularizer_grad(const BarrierCertificate& cert,
                               const StateValueFn& prev,
                               const std::vector<Vec>& candidates, Vec& acc,
                               double scale = 1.0);

// Sampling target for adversarial states: log p = lambda1 * U(s, pi(s))
// - lambda2 * [h(s) < 0], supported on the audit box. The indicator is
// piecewise constant and contributes nothing to the gradient.
TargetDensity adversarial_target(const SafetyOp& op, const PolicyFn& pi,
                                 double lambda1, double lambda2, Vec box_lo,
                                 Vec box_hi);

struct CertTrainConfig {
  int iters = 500;
  int mala_steps = 5;
  double lambda_reg = 0.001;  // growth regularizer weight
  double lambda1 = 30.0;      // sampling sharpness on U
  double lambda2 = 1000.0;    // soft barrier against uncertified samples
  double alpha = 0.0;
  Vec box_lo, box_hi;
};

struct CertTrainResult {
  bool ok = false;
  double final_c_star = 1e300;
  double final_reg = 0.0;
  int empty_iters = 0;    // iterations skipped for lack of certified candidates
  double max_kkt = 0.0;
};

// Adversarial training loop: refresh the MALA candidates against the live
// certificate, then descend C* + lambda_reg * Reg for a fixed number of
// iterations. Success means the final refreshed C* is non-positive.
CertTrainResult train_certificate(BarrierCertificate& cert, const PolicyFn& pi,
                                  const ConfidenceModel& model, CandidateSet& set,
                                  const StateValueFn& prev, AdamState& adam,
                                  const CertTrainConfig& cfg);

}  // namespace crabs
