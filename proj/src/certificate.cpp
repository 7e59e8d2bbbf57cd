#include "crabs/certificate.hpp"

#include <algorithm>
#include <cmath>

namespace crabs {

UnsafeField task_unsafe_field(const TaskSpec& task) {
  UnsafeField u;
  u.value = [task](const Vec& s) { return b_unsafe(task, s); };
  u.grad = [task](const Vec& s, Vec& g) { b_unsafe_grad(task, s, g); };
  return u;
}

void BarrierCertificate::refresh() { f_s0 = f.forward(s0, ws)[0]; }

double BarrierCertificate::value(const Vec& s) const {
  double fs = f.forward(s, ws)[0];
  double anchor = b_init ? softplus(fs) * (1.0 - b_init(s))
                         : softplus(fs - f_s0);
  return 1.0 - anchor - unsafe.value(s);
}

double BarrierCertificate::value_grad(const Vec& s, Vec& grad) const {
  grad.assign(s.size(), 0.0);
  double fs = f.forward(s, ws)[0];
  double anchor, dcoef;
  if (b_init) {
    double k = 1.0 - b_init(s);
    anchor = softplus(fs) * k;
    dcoef = logistic(fs) * k;
    if (b_init_grad) {
      Vec gi(s.size());
      b_init_grad(s, gi);
      axpy(softplus(fs), gi, grad);  // -d anchor = +softplus * d b_init
    }
  } else {
    anchor = softplus(fs - f_s0);
    dcoef = logistic(fs - f_s0);
  }
  static const Vec one = {1.0};
  Vec gf(s.size());
  f.backward(ws, one, nullptr, gf.data());
  axpy(-dcoef, gf, grad);
  Vec gb(s.size());
  unsafe.grad(s, gb);
  axpy(-1.0, gb, grad);
  return 1.0 - anchor - unsafe.value(s);
}

void BarrierCertificate::add_param_grad(const Vec& s, double coeff,
                                        Vec& acc) const {
  static const Vec one = {1.0};
  double fs = f.forward(s, ws)[0];
  if (b_init) {
    Vec up = {coeff * -logistic(fs) * (1.0 - b_init(s))};
    f.backward(ws, up, acc.data(), nullptr);
    return;
  }
  double c = coeff * -logistic(fs - f_s0);
  Vec up = {c};
  f.backward(ws, up, acc.data(), nullptr);
  f.forward(s0, ws);
  up[0] = -c;
  f.backward(ws, up, acc.data(), nullptr);
}

BarrierCertificate make_task_certificate(const TaskSpec& task,
                                         const std::vector<int>& hidden,
                                         std::uint64_t seed) {
  BarrierCertificate cert;
  std::vector<int> sizes;
  sizes.push_back(task.state_dim);
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(1);
  cert.f = Mlp(std::move(sizes), Activation::tanh);
  Rng rng(seed);
  cert.f.init(rng);
  cert.s0 = task.s0;
  cert.unsafe = task_unsafe_field(task);
  cert.refresh();
  return cert;
}

UEval SafetyOp::eval(const Vec& s, const Vec& a) const {
  std::vector<Vec> region;
  model->region(s, a, region);
  UEval ev;
  double worst = -1e300;
  for (std::size_t k = 0; k < region.size(); ++k) {
    double hv = h->value(region[k]);
    if (-hv > worst) {
      worst = -hv;
      ev.argmax = int(k);
      ev.h_next = hv;
    }
  }
  ev.next = region[std::size_t(ev.argmax)];
  ev.u = worst + (alpha != 0.0 ? alpha * h->value(s) : 0.0);
  return ev;
}

double SafetyOp::grad_state_total(const Vec& s, const PolicyFn& pi,
                                  Vec& gs) const {
  Vec a;
  pi.act(s, a);
  UEval ev = eval(s, a);
  Vec vh(s.size());
  h->value_grad(ev.next, vh);
  for (auto& x : vh) x = -x;  // upstream of the mean: d(-h)/d next
  gs.assign(s.size(), 0.0);
  Vec ga(a.size(), 0.0);
  model->mean_vjp(ev.argmax, s, a, vh, gs, ga);
  pi.act_vjp(s, ga, gs);
  if (alpha != 0.0) {
    Vec gh(s.size());
    h->value_grad(s, gh);
    axpy(alpha, gh, gs);
  }
  return ev.u;
}

double SafetyOp::grad_action(const Vec& s, const Vec& a, Vec& ga) const {
  UEval ev = eval(s, a);
  Vec vh(s.size());
  h->value_grad(ev.next, vh);
  for (auto& x : vh) x = -x;
  ga.assign(a.size(), 0.0);
  Vec gs_scratch(s.size(), 0.0);
  model->mean_vjp(ev.argmax, s, a, vh, gs_scratch, ga);
  return ev.u;
}

CStarResult c_star(const SafetyOp& op, const PolicyFn& pi,
                   const std::vector<Vec>& candidates) {
  CStarResult cs;
  cs.h_vals.resize(candidates.size());
  Vec u_vals(candidates.size(), -1e300);
  Vec a;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cs.h_vals[i] = op.h->value(candidates[i]);
    if (cs.h_vals[i] < 0.0) continue;
    cs.empty_certified = false;
    pi.act(candidates[i], a);
    u_vals[i] = op.eval(candidates[i], a).u;
    if (u_vals[i] > cs.value) {
      cs.value = u_vals[i];
      cs.argmax = int(i);
    }
  }
  if (cs.empty_certified) return cs;
  double cutoff = cs.value - 0.05 * std::abs(cs.value);
  cs.band.push_back(cs.argmax);
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (int(i) != cs.argmax && cs.h_vals[i] >= 0.0 && u_vals[i] >= cutoff)
      cs.band.push_back(int(i));
  return cs;
}

double kkt_multiplier(const Vec& grad_u, const Vec& grad_h, double h_at,
                      double active_tol) {
  if (h_at > active_tol) return 0.0;
  double nu = norm2(grad_h);
  if (nu < 1e-12)
    throw NumericalError(
        "active constraint with vanishing barrier gradient: |grad h| = " +
        std::to_string(nu));
  return norm2(grad_u) / nu;
}

double envelope_param_grad(const BarrierCertificate& cert, const SafetyOp& op,
                           const PolicyFn& pi, const std::vector<Vec>& candidates,
                           const CStarResult& cs, Vec& acc) {
  double w = 1.0 / double(cs.band.size());
  double max_nu = 0.0;
  Vec gu, gh;
  for (int idx : cs.band) {
    const Vec& s = candidates[std::size_t(idx)];
    Vec a;
    pi.act(s, a);
    UEval ev = op.eval(s, a);
    // direct dependence: dU/dphi = alpha * dh(s)/dphi - dh(next*)/dphi
    if (op.alpha != 0.0) cert.add_param_grad(s, w * op.alpha, acc);
    cert.add_param_grad(ev.next, -w, acc);
    // constraint dependence through the maximizer
    double u = op.grad_state_total(s, pi, gu);
    (void)u;
    double hv = cert.value_grad(s, gh);
    double nu = kkt_multiplier(gu, gh, hv);
    if (nu != 0.0) cert.add_param_grad(s, w * nu, acc);
    max_nu = std::max(max_nu, nu);
  }
  return max_nu;
}

double growth_regularizer(const BarrierCertificate& cert,
                          const StateValueFn& prev,
                          const std::vector<Vec>& candidates) {
  double sum = 0.0;
  for (const Vec& s : candidates)
    sum += std::max(0.0, prev.value(s) - cert.value(s));
  return sum / double(candidates.size());
}

double growth_regularizer_grad(const BarrierCertificate& cert,
                               const StateValueFn& prev,
                               const std::vector<Vec>& candidates, Vec& acc,
                               double scale) {
  double sum = 0.0;
  double w = scale / double(candidates.size());
  for (const Vec& s : candidates) {
    double d = prev.value(s) - cert.value(s);
    if (d <= 0.0) continue;
    sum += d;
    cert.add_param_grad(s, -w, acc);
  }
  return sum / double(candidates.size());
}

TargetDensity adversarial_target(const SafetyOp& op, const PolicyFn& pi,
                                 double lambda1, double lambda2, Vec box_lo,
                                 Vec box_hi) {
  TargetDensity t;
  t.box_lo = std::move(box_lo);
  t.box_hi = std::move(box_hi);
  // op is tiny and copied; the certificate, model, and policy it points to
  // must outlive the returned density.
  const PolicyFn* pip = &pi;
  t.log_p = [op, pip, lambda1, lambda2](const Vec& s) {
    Vec a;
    pip->act(s, a);
    double lp = lambda1 * op.eval(s, a).u;
    if (op.h->value(s) < 0.0) lp -= lambda2;
    return lp;
  };
  t.log_p_grad = [op, pip, lambda1, lambda2](const Vec& s, Vec& g) {
    double u = lambda1 * op.grad_state_total(s, *pip, g);
    for (auto& x : g) x *= lambda1;
    if (op.h->value(s) < 0.0) u -= lambda2;
    return u;
  };
  return t;
}

CertTrainResult train_certificate(BarrierCertificate& cert, const PolicyFn& pi,
                                  const ConfidenceModel& model,
                                  CandidateSet& set, const StateValueFn& prev,
                                  AdamState& adam, const CertTrainConfig& cfg) {
  SafetyOp op{&cert, &model, cfg.alpha};
  TargetDensity target = adversarial_target(op, pi, cfg.lambda1, cfg.lambda2,
                                            cfg.box_lo, cfg.box_hi);
  CertTrainResult res;
  Vec grad(std::size_t(cert.f.param_count()));
  for (int it = 0; it < cfg.iters; ++it) {
    refresh_candidates(set, target, cert, cert.s0, cfg.mala_steps);
    CStarResult cs = c_star(op, pi, set.states);
    if (cs.empty_certified) {
      ++res.empty_iters;
      continue;
    }
    std::fill(grad.begin(), grad.end(), 0.0);
    double nu = envelope_param_grad(cert, op, pi, set.states, cs, grad);
    res.max_kkt = std::max(res.max_kkt, nu);
    if (cfg.lambda_reg > 0.0)
      growth_regularizer_grad(cert, prev, set.states, grad, cfg.lambda_reg);
    adam.step(cert.f.params, grad);
    cert.refresh();
  }
  refresh_candidates(set, target, cert, cert.s0, cfg.mala_steps);
  CStarResult cs = c_star(op, pi, set.states);
  res.final_c_star = cs.empty_certified ? 1e300 : cs.value;
  res.final_reg = growth_regularizer(cert, prev, set.states);
  res.ok = !cs.empty_certified && cs.value <= 0.0;
  return res;
}

}  // namespace crabs
