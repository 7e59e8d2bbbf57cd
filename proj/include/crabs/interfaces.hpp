#pragma once

#include <vector>

#include "crabs/common.hpp"

namespace crabs {

// Deterministic policy view used by certification, sampling, and shielding.
struct PolicyFn {
  virtual ~PolicyFn() = default;
  virtual int action_dim() const = 0;
  virtual void act(const Vec& s, Vec& a) const = 0;
  // grad += d<w, act(s)> / ds
  virtual void act_vjp(const Vec& s, const Vec& w, Vec& grad) const = 0;
};

// A set-valued one-step predictor: K next-state candidates whose pointwise
// max drives the safety operator.
struct ConfidenceModel {
  virtual ~ConfidenceModel() = default;
  virtual int members() const = 0;
  virtual int state_dim() const = 0;
  virtual void region(const Vec& s, const Vec& a, std::vector<Vec>& out) const = 0;
  // For member k: gs += d<v, mu_k(s,a)>/ds, ga += d<v, mu_k(s,a)>/da.
  virtual void mean_vjp(int k, const Vec& s, const Vec& a, const Vec& v,
                        Vec& gs, Vec& ga) const = 0;
};

// Scalar field over states with gradients (barrier functions).
struct StateValueFn {
  virtual ~StateValueFn() = default;
  virtual double value(const Vec& s) const = 0;
  // returns value(s), fills grad (overwritten)
  virtual double value_grad(const Vec& s, Vec& grad) const = 0;
};

}  // namespace crabs
