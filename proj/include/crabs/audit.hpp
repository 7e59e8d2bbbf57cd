#pragma once

#include <functional>

#include "crabs/certificate.hpp"
#include "crabs/interfaces.hpp"
#include "crabs/rng.hpp"

namespace crabs {

struct AuditResult {
  double max_u_certified = -1e300;  // max U over audited certified states
  Vec argmax_u;
  double max_h_unsafe = -1e300;     // max h over audited unsafe states
  Vec argmax_h_unsafe;
  std::size_t certified = 0, unsafe_points = 0, total = 0;

  bool invariant(double tol = 1e-3) const {
    return certified > 0 && max_u_certified <= tol;
  }
  bool excludes_unsafe() const {
    return unsafe_points == 0 || max_h_unsafe < 0.0;
  }
};

// Exhaustive res x res sweep of a 2D box: worst U over certified points and
// worst h over unsafe points.
AuditResult grid_audit_2d(const SafetyOp& op, const PolicyFn& pi,
                          const std::function<bool(const Vec&)>& unsafe_pred,
                          const Vec& lo, const Vec& hi, int res);

// Monte Carlo version for higher-dimensional boxes.
AuditResult mc_audit(const SafetyOp& op, const PolicyFn& pi,
                     const std::function<bool(const Vec&)>& unsafe_pred,
                     const Vec& lo, const Vec& hi, std::size_t samples, Rng rng);

// Fraction of uniform box samples with h >= 0 (certified volume estimate).
double certified_volume(const StateValueFn& h, const Vec& lo, const Vec& hi,
                        std::size_t samples, Rng rng);

}  // namespace crabs
