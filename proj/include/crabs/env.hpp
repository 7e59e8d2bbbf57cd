#pragma once

#include <string>

#include "crabs/common.hpp"

namespace crabs {

enum class TaskId { upright = 0, tilt = 1, move = 2, swing = 3 };

TaskId task_from_name(const std::string& name);
std::string task_name(TaskId id);

struct PendulumParams {
  double gravity = 10.0;
  double mass = 1.0;
  double length = 1.0;
  double dt = 0.05;
  double max_speed = 8.0;
  double torque_scale = 2.0;  // torque u = torque_scale * a, a in [-1,1]
};

struct CartpoleParams {
  double gravity = 9.8;
  double masscart = 1.0;
  double masspole = 0.1;
  double half_length = 0.5;
  double force_scale = 10.0;  // force = force_scale * a
  double dt = 0.02;
};

// Pendulum state: (theta, theta_dot). Cartpole state: (x, x_dot, theta,
// theta_dot). Actions are 1D in [-1, 1].
struct TaskSpec {
  TaskId id = TaskId::upright;
  int state_dim = 2;
  int action_dim = 1;
  int horizon = 200;
  double theta_max = 1.5;
  double x_max = -1.0;  // < 0: no cart position constraint (pendulum tasks)
  double tilt_theta_limit = -0.41151684;
  double violation_penalty = -30.0;
  Vec s0;
  PendulumParams pend;
  CartpoleParams cart;
  // safe_lo/hi: position coordinates exactly at the constraint bounds,
  // velocities at the measurement bounds. audit_lo/hi additionally extends
  // positions past the constraint so grids and samplers see unsafe states.
  Vec safe_lo, safe_hi, audit_lo, audit_hi;
  // Hard range of each state coordinate under the true dynamics (infinite
  // where unbounded); learned models project their predictions onto it.
  Vec state_clip_lo, state_clip_hi;

  bool is_cartpole() const { return id == TaskId::move || id == TaskId::swing; }
};

TaskSpec make_task(TaskId id);

Vec initial_state(const TaskSpec& spec);
Vec step_state(const TaskSpec& spec, const Vec& s, const Vec& a);
double reward(const TaskSpec& spec, const Vec& s, const Vec& a);
bool is_safe(const TaskSpec& spec, const Vec& s);

struct StepResult {
  Vec next;
  double r = 0.0;
  bool violated = false;
};
// Dynamics step plus reward; a violating next state adds the penalty and
// terminates the episode.
StepResult env_step(const TaskSpec& spec, const Vec& s, const Vec& a);

// max over constrained coordinates y of max(0, 100 * (|y|/limit - 1)):
// zero on the safe set, >= 100 * margin outside it.
double b_unsafe(const TaskSpec& spec, const Vec& s);
void b_unsafe_grad(const TaskSpec& spec, const Vec& s, Vec& grad);

// d next / d state and d next / d action of step_state.
void step_jacobian(const TaskSpec& spec, const Vec& s, const Vec& a,
                   Matrix& Js, Matrix& Ja);

}  // namespace crabs
