#include "crabs/env.hpp"

#include <cmath>
#include <limits>

namespace crabs {

TaskId task_from_name(const std::string& name) {
  if (name == "upright") return TaskId::upright;
  if (name == "tilt") return TaskId::tilt;
  if (name == "move") return TaskId::move;
  if (name == "swing") return TaskId::swing;
  throw ConfigError("unknown task: " + name);
}

std::string task_name(TaskId id) {
  switch (id) {
    case TaskId::upright: return "upright";
    case TaskId::tilt: return "tilt";
    case TaskId::move: return "move";
    case TaskId::swing: return "swing";
  }
  return "?";
}

TaskSpec make_task(TaskId id) {
  TaskSpec spec;
  spec.id = id;
  switch (id) {
    case TaskId::upright:
    case TaskId::tilt:
      spec.state_dim = 2;
      spec.horizon = 200;
      spec.theta_max = 1.5;
      spec.s0 = {0.3, -0.9};
      spec.safe_lo = {-spec.theta_max, -spec.pend.max_speed};
      spec.safe_hi = {spec.theta_max, spec.pend.max_speed};
      spec.audit_lo = {-2.0, -spec.pend.max_speed};
      spec.audit_hi = {2.0, spec.pend.max_speed};
      break;
    case TaskId::move:
      spec.state_dim = 4;
      spec.horizon = 1000;
      spec.theta_max = 0.2;
      spec.x_max = 0.9;
      spec.s0 = {0.0, 0.0, 0.0, 0.0};
      spec.safe_lo = {-spec.x_max, -2.5, -spec.theta_max, -2.5};
      spec.safe_hi = {spec.x_max, 2.5, spec.theta_max, 2.5};
      spec.audit_lo = {-1.2, -2.5, -0.4, -2.5};
      spec.audit_hi = {1.2, 2.5, 0.4, 2.5};
      break;
    case TaskId::swing:
      spec.state_dim = 4;
      spec.horizon = 1000;
      spec.theta_max = 1.5;
      spec.x_max = 0.9;
      spec.s0 = {0.0, 0.0, 0.0, 0.0};
      spec.safe_lo = {-spec.x_max, -2.5, -spec.theta_max, -2.5};
      spec.safe_hi = {spec.x_max, 2.5, spec.theta_max, 2.5};
      spec.audit_lo = {-1.2, -2.5, -2.0, -2.5};
      spec.audit_hi = {1.2, 2.5, 2.0, 2.5};
      break;
  }
  const double inf = std::numeric_limits<double>::infinity();
  spec.state_clip_lo.assign(std::size_t(spec.state_dim), -inf);
  spec.state_clip_hi.assign(std::size_t(spec.state_dim), inf);
  if (!spec.is_cartpole()) {
    spec.state_clip_lo[1] = -spec.pend.max_speed;  // simulator clips theta_dot
    spec.state_clip_hi[1] = spec.pend.max_speed;
  }
  return spec;
}

Vec initial_state(const TaskSpec& spec) { return spec.s0; }

static Vec pendulum_step(const PendulumParams& p, const Vec& s, double a) {
  double torque = p.torque_scale * clip(a, -1.0, 1.0);
  double acc = 3.0 * p.gravity / (2.0 * p.length) * std::sin(s[0]) +
               3.0 / (p.mass * p.length * p.length) * torque;
  double thd = clip(s[1] + p.dt * acc, -p.max_speed, p.max_speed);
  return {s[0] + p.dt * thd, thd};
}

static Vec cartpole_step(const CartpoleParams& c, const Vec& s, double a) {
  double force = c.force_scale * clip(a, -1.0, 1.0);
  double x = s[0], xd = s[1], th = s[2], thd = s[3];
  double sin_t = std::sin(th), cos_t = std::cos(th);
  double total_mass = c.masscart + c.masspole;
  double pml = c.masspole * c.half_length;
  double temp = (force + pml * thd * thd * sin_t) / total_mass;
  double denom =
      c.half_length * (4.0 / 3.0 - c.masspole * cos_t * cos_t / total_mass);
  double th_acc = (c.gravity * sin_t - cos_t * temp) / denom;
  double x_acc = temp - pml * th_acc * cos_t / total_mass;
  // semi-implicit Euler: velocities first, positions with the new velocities
  double xd2 = xd + c.dt * x_acc;
  double thd2 = thd + c.dt * th_acc;
  return {x + c.dt * xd2, xd2, th + c.dt * thd2, thd2};
}

Vec step_state(const TaskSpec& spec, const Vec& s, const Vec& a) {
  if (spec.is_cartpole()) return cartpole_step(spec.cart, s, a[0]);
  return pendulum_step(spec.pend, s, a[0]);
}

double reward(const TaskSpec& spec, const Vec& s, const Vec&) {
  switch (spec.id) {
    case TaskId::upright: return -s[0] * s[0];
    case TaskId::tilt: {
      double d = spec.tilt_theta_limit - s[0];
      return -d * d;
    }
    case TaskId::move: return s[0] * s[0];
    case TaskId::swing: return s[2] * s[2];
  }
  return 0.0;
}

bool is_safe(const TaskSpec& spec, const Vec& s) {
  double th = spec.is_cartpole() ? s[2] : s[0];
  if (std::abs(th) > spec.theta_max) return false;
  if (spec.x_max > 0.0 && std::abs(s[0]) > spec.x_max) return false;
  return true;
}

StepResult env_step(const TaskSpec& spec, const Vec& s, const Vec& a) {
  StepResult res;
  res.next = step_state(spec, s, a);
  res.r = reward(spec, s, a);
  res.violated = !is_safe(spec, res.next);
  if (res.violated) res.r += spec.violation_penalty;
  return res;
}

static double ramp(double y) {  // max(0, 100 * (|y| - 1))
  double v = std::abs(y) - 1.0;
  return v > 0.0 ? 100.0 * v : 0.0;
}

double b_unsafe(const TaskSpec& spec, const Vec& s) {
  double th = spec.is_cartpole() ? s[2] : s[0];
  double b = ramp(th / spec.theta_max);
  if (spec.x_max > 0.0) b = std::max(b, ramp(s[0] / spec.x_max));
  return b;
}

void b_unsafe_grad(const TaskSpec& spec, const Vec& s, Vec& grad) {
  grad.assign(spec.state_dim, 0.0);
  int ti = spec.is_cartpole() ? 2 : 0;
  double bt = ramp(s[ti] / spec.theta_max);
  double bx = spec.x_max > 0.0 ? ramp(s[0] / spec.x_max) : 0.0;
  // subgradient of the max: the theta term wins ties
  if (bt >= bx) {
    if (bt > 0.0) grad[ti] = 100.0 * (s[ti] > 0 ? 1.0 : -1.0) / spec.theta_max;
  } else if (bx > 0.0) {
    grad[0] = 100.0 * (s[0] > 0 ? 1.0 : -1.0) / spec.x_max;
  }
}

static void pendulum_jacobian(const PendulumParams& p, const Vec& s, double a,
                              Matrix& Js, Matrix& Ja) {
  Js = Matrix(2, 2);
  Ja = Matrix(2, 1);
  double acc = 3.0 * p.gravity / (2.0 * p.length) * std::sin(s[0]) +
               3.0 / (p.mass * p.length * p.length) * p.torque_scale *
                   clip(a, -1.0, 1.0);
  double pre = s[1] + p.dt * acc;
  bool clipped = pre <= -p.max_speed || pre >= p.max_speed;
  double dacc_dth = 3.0 * p.gravity / (2.0 * p.length) * std::cos(s[0]);
  double dacc_da = (a > -1.0 && a < 1.0)
                       ? 3.0 / (p.mass * p.length * p.length) * p.torque_scale
                       : 0.0;
  double d1_th = clipped ? 0.0 : p.dt * dacc_dth;
  double d1_thd = clipped ? 0.0 : 1.0;
  double d1_a = clipped ? 0.0 : p.dt * dacc_da;
  Js.at(1, 0) = d1_th;
  Js.at(1, 1) = d1_thd;
  Ja.at(1, 0) = d1_a;
  Js.at(0, 0) = 1.0 + p.dt * d1_th;
  Js.at(0, 1) = p.dt * d1_thd;
  Ja.at(0, 0) = p.dt * d1_a;
}

static void cartpole_jacobian(const CartpoleParams& c, const Vec& s, double a,
                              Matrix& Js, Matrix& Ja) {
  Js = Matrix(4, 4);
  Ja = Matrix(4, 1);
  double th = s[2], thd = s[3];
  double sin_t = std::sin(th), cos_t = std::cos(th);
  double total_mass = c.masscart + c.masspole;
  double pml = c.masspole * c.half_length;
  double force = c.force_scale * clip(a, -1.0, 1.0);
  double temp = (force + pml * thd * thd * sin_t) / total_mass;
  double denom =
      c.half_length * (4.0 / 3.0 - c.masspole * cos_t * cos_t / total_mass);
  double th_acc = (c.gravity * sin_t - cos_t * temp) / denom;

  double dtemp_dth = pml * thd * thd * cos_t / total_mass;
  double dtemp_dthd = 2.0 * pml * thd * sin_t / total_mass;
  double dtemp_df = 1.0 / total_mass;
  double ddenom_dth = c.half_length * 2.0 * c.masspole * cos_t * sin_t / total_mass;
  double num = c.gravity * sin_t - cos_t * temp;
  double dnum_dth = c.gravity * cos_t + sin_t * temp - cos_t * dtemp_dth;
  double dtha_dth = (dnum_dth * denom - num * ddenom_dth) / (denom * denom);
  double dtha_dthd = -cos_t * dtemp_dthd / denom;
  double dtha_df = -cos_t * dtemp_df / denom;

  double dxa_dth = dtemp_dth - pml * (dtha_dth * cos_t - th_acc * sin_t) / total_mass;
  double dxa_dthd = dtemp_dthd - pml * dtha_dthd * cos_t / total_mass;
  double dxa_df = dtemp_df - pml * dtha_df * cos_t / total_mass;

  double df_da = (a > -1.0 && a < 1.0) ? c.force_scale : 0.0;

  // velocity rows
  Js.at(1, 1) = 1.0;
  Js.at(1, 2) = c.dt * dxa_dth;
  Js.at(1, 3) = c.dt * dxa_dthd;
  Ja.at(1, 0) = c.dt * dxa_df * df_da;
  Js.at(3, 2) = c.dt * dtha_dth;
  Js.at(3, 3) = 1.0 + c.dt * dtha_dthd;
  Ja.at(3, 0) = c.dt * dtha_df * df_da;
  // position rows use the updated velocities
  Js.at(0, 0) = 1.0;
  for (int j = 0; j < 4; ++j) Js.at(0, j) += c.dt * Js.at(1, j);
  Ja.at(0, 0) = c.dt * Ja.at(1, 0);
  Js.at(2, 2) = 1.0;
  for (int j = 0; j < 4; ++j) Js.at(2, j) += c.dt * Js.at(3, j);
  Ja.at(2, 0) = c.dt * Ja.at(3, 0);
}

void step_jacobian(const TaskSpec& spec, const Vec& s, const Vec& a,
                   Matrix& Js, Matrix& Ja) {
  if (spec.is_cartpole())
    cartpole_jacobian(spec.cart, s, a[0], Js, Ja);
  else
    pendulum_jacobian(spec.pend, s, a[0], Js, Ja);
}

}  // namespace crabs
