#include "crabs/audit.hpp"

namespace crabs {

namespace {

void audit_point(const SafetyOp& op, const PolicyFn& pi,
                 const std::function<bool(const Vec&)>& unsafe_pred,
                 const Vec& s, Vec& a, AuditResult& r) {
  ++r.total;
  double hv = op.h->value(s);
  if (unsafe_pred(s)) {
    ++r.unsafe_points;
    if (hv > r.max_h_unsafe) {
      r.max_h_unsafe = hv;
      r.argmax_h_unsafe = s;
    }
  }
  if (hv < 0.0) return;
  ++r.certified;
  pi.act(s, a);
  double u = op.eval(s, a).u;
  if (u > r.max_u_certified) {
    r.max_u_certified = u;
    r.argmax_u = s;
  }
}

}  // namespace

AuditResult grid_audit_2d(const SafetyOp& op, const PolicyFn& pi,
                          const std::function<bool(const Vec&)>& unsafe_pred,
                          const Vec& lo, const Vec& hi, int res) {
  AuditResult r;
  Vec s(2), a;
  for (int i = 0; i < res; ++i) {
    s[0] = lo[0] + (hi[0] - lo[0]) * double(i) / double(res - 1);
    for (int j = 0; j < res; ++j) {
      s[1] = lo[1] + (hi[1] - lo[1]) * double(j) / double(res - 1);
      audit_point(op, pi, unsafe_pred, s, a, r);
    }
  }
  return r;
}

AuditResult mc_audit(const SafetyOp& op, const PolicyFn& pi,
                     const std::function<bool(const Vec&)>& unsafe_pred,
                     const Vec& lo, const Vec& hi, std::size_t samples,
                     Rng rng) {
  AuditResult r;
  Vec s(lo.size()), a;
  for (std::size_t n = 0; n < samples; ++n) {
    for (std::size_t d = 0; d < lo.size(); ++d) s[d] = rng.uniform(lo[d], hi[d]);
    audit_point(op, pi, unsafe_pred, s, a, r);
  }
  return r;
}

double certified_volume(const StateValueFn& h, const Vec& lo, const Vec& hi,
                        std::size_t samples, Rng rng) {
  std::size_t in = 0;
  Vec s(lo.size());
  for (std::size_t n = 0; n < samples; ++n) {
    for (std::size_t d = 0; d < lo.size(); ++d) s[d] = rng.uniform(lo[d], hi[d]);
    if (h.value(s) >= 0.0) ++in;
  }
  return double(in) / double(samples);
}

}  // namespace crabs
