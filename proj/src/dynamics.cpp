#include "crabs/dynamics.hpp"

#include <algorithm>
#include <cmath>

namespace crabs {

void Normalizer::fit(const ReplayBuffer& buf) {
  const std::size_t sdim = buf.data[0].s.size(), adim = buf.data[0].a.size();
  const std::size_t dim = sdim + adim;
  mean.assign(dim, 0.0);
  stdev.assign(dim, 0.0);
  for (const auto& t : buf.data) {
    for (std::size_t d = 0; d < sdim; ++d) mean[d] += t.s[d];
    for (std::size_t d = 0; d < adim; ++d) mean[sdim + d] += t.a[d];
  }
  for (auto& m : mean) m /= double(buf.size());
  for (const auto& t : buf.data) {
    for (std::size_t d = 0; d < sdim; ++d) {
      double c = t.s[d] - mean[d];
      stdev[d] += c * c;
    }
    for (std::size_t d = 0; d < adim; ++d) {
      double c = t.a[d] - mean[sdim + d];
      stdev[sdim + d] += c * c;
    }
  }
  for (auto& v : stdev) v = std::max(std::sqrt(v / double(buf.size())), 1e-8);
}

void Normalizer::apply(const Vec& s, const Vec& a, Vec& out) const {
  out.resize(mean.size());
  for (std::size_t d = 0; d < s.size(); ++d)
    out[d] = (s[d] - mean[d]) / stdev[d];
  for (std::size_t d = 0; d < a.size(); ++d)
    out[s.size() + d] = (a[d] - mean[s.size() + d]) / stdev[s.size() + d];
}

double clamp_logvar(double raw, double mx, double mn) {
  double t = mx - softplus(mx - raw);
  return mn + softplus(t - mn);
}

double gaussian_nll(const Vec& mu, const Vec& lv, const Vec& target) {
  double s = 0.0;
  for (std::size_t d = 0; d < mu.size(); ++d) {
    double r = target[d] - mu[d];
    s += 0.5 * (std::log(2.0 * M_PI) + lv[d] + r * r * std::exp(-lv[d]));
  }
  return s;
}

EnsembleDynamics EnsembleDynamics::make(int k, int sdim, int adim,
                                        const std::vector<int>& hidden,
                                        std::uint64_t seed) {
  EnsembleDynamics ens;
  ens.sdim = sdim;
  ens.adim = adim;
  ens.norm.identity(sdim + adim);
  std::vector<int> sizes;
  sizes.push_back(sdim + adim);
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(2 * sdim);
  Rng master(seed);
  ens.nets.resize(std::size_t(k));
  for (auto& net : ens.nets) {
    net.trunk = Mlp(sizes, Activation::swish);
    net.trunk.init(master);
    net.lv_max.assign(std::size_t(sdim), 0.0);
    net.lv_min.assign(std::size_t(sdim), -10.0);
    net.adam_trunk.init(std::size_t(net.trunk.param_count()), 1e-3, 7.5e-5);
    net.adam_max.init(std::size_t(sdim), 1e-3, 0.0);
    net.adam_min.init(std::size_t(sdim), 1e-3, 0.0);
  }
  for (std::size_t i = 0; i < ens.nets.size(); ++i)
    ens.nets[i].rng = master.fork(i + 1);
  return ens;
}

EnsembleDynamics EnsembleDynamics::make_for_task(const TaskSpec& task, int k,
                                                 const std::vector<int>& hidden,
                                                 std::uint64_t seed) {
  auto ens = make(k, task.state_dim, task.action_dim, hidden, seed);
  ens.clip_lo = task.state_clip_lo;
  ens.clip_hi = task.state_clip_hi;
  return ens;
}

void EnsembleDynamics::predict(int k, const Vec& s, const Vec& a,
                               Vec& next) const {
  const auto& net = nets[std::size_t(k)];
  Vec xn;
  norm.apply(s, a, xn);
  const Vec& out = net.trunk.forward(xn, net.ws);
  next.resize(std::size_t(sdim));
  for (std::size_t d = 0; d < std::size_t(sdim); ++d) {
    next[d] = s[d] + out[d];
    if (!clip_lo.empty()) next[d] = clip(next[d], clip_lo[d], clip_hi[d]);
  }
}

void EnsembleDynamics::region(const Vec& s, const Vec& a,
                              std::vector<Vec>& out) const {
  out.resize(nets.size());
  for (std::size_t k = 0; k < nets.size(); ++k) predict(int(k), s, a, out[k]);
}

void EnsembleDynamics::mean_vjp(int k, const Vec& s, const Vec& a, const Vec& v,
                                Vec& gs, Vec& ga) const {
  const auto& net = nets[std::size_t(k)];
  Vec xn;
  norm.apply(s, a, xn);
  const Vec& out = net.trunk.forward(xn, net.ws);
  // coordinates saturated by the state-space projection pass no gradient
  Vec up(std::size_t(2 * sdim), 0.0);
  for (std::size_t d = 0; d < std::size_t(sdim); ++d) {
    double raw = s[d] + out[d];
    bool saturated =
        !clip_lo.empty() && (raw < clip_lo[d] || raw > clip_hi[d]);
    up[d] = saturated ? 0.0 : v[d];
  }
  Vec gin(xn.size());
  net.trunk.backward(net.ws, up, nullptr, gin.data());
  // chain through x_norm = (x - mean) / stdev, plus the identity skip on s
  for (std::size_t d = 0; d < std::size_t(sdim); ++d)
    gs[d] += up[d] + gin[d] / norm.stdev[d];
  for (std::size_t d = 0; d < std::size_t(adim); ++d)
    ga[d] += gin[std::size_t(sdim) + d] / norm.stdev[std::size_t(sdim) + d];
}

double member_nll(const EnsembleDynamics& ens, int k, const ReplayBuffer& buf,
                  const std::vector<std::size_t>& idx, Vec* gtrunk, Vec* gmax,
                  Vec* gmin) {
  const auto& net = ens.nets[std::size_t(k)];
  const double inv_b = 1.0 / double(idx.size());
  const std::size_t sd = std::size_t(ens.sdim);
  double loss = 0.0;
  Vec xn, up(2 * sd);
  for (std::size_t i : idx) {
    const Transition& t = buf.data[i];
    ens.norm.apply(t.s, t.a, xn);
    const Vec& out = net.trunk.forward(xn, net.ws);
    double sample = 0.0;
    for (std::size_t d = 0; d < sd; ++d) {
      double raw = out[sd + d], mx = net.lv_max[d], mn = net.lv_min[d];
      double t1 = mx - softplus(mx - raw);
      double lv = mn + softplus(t1 - mn);
      double r = (t.next[d] - t.s[d]) - out[d];
      double elv = std::exp(-lv);
      sample += 0.5 * (std::log(2.0 * M_PI) + lv + r * r * elv);
      double dlv = 0.5 * (1.0 - r * r * elv) * inv_b;
      double s_in = logistic(t1 - mn), s_out = logistic(mx - raw);
      up[d] = -r * elv * inv_b;
      up[sd + d] = dlv * s_in * s_out;
      if (gmax) (*gmax)[d] += dlv * s_in * (1.0 - s_out);
      if (gmin) (*gmin)[d] += dlv * (1.0 - s_in);
    }
    if (!std::isfinite(sample))
      throw NumericalError("non-finite loss at sample index " +
                           std::to_string(i));
    loss += sample * inv_b;
    if (gtrunk) net.trunk.backward(net.ws, up, gtrunk->data(), nullptr);
  }
  for (std::size_t d = 0; d < sd; ++d) {
    loss += ens.bound_penalty * (net.lv_max[d] - net.lv_min[d]);
    if (gmax) (*gmax)[d] += ens.bound_penalty;
    if (gmin) (*gmin)[d] -= ens.bound_penalty;
  }
  return loss;
}

void train_ensemble(EnsembleDynamics& ens, const ReplayBuffer& buf, int steps,
                    int batch_size, NllTrace* trace) {
  ens.norm.fit(buf);
  if (trace) trace->member_nll.assign(ens.nets.size(), {});
  std::vector<std::size_t> idx;
  Vec gt, gmax, gmin;
  for (int step = 0; step < steps; ++step) {
    for (std::size_t k = 0; k < ens.nets.size(); ++k) {
      auto& net = ens.nets[k];
      buf.sample_indices(net.rng, batch_size, idx);
      gt.assign(std::size_t(net.trunk.param_count()), 0.0);
      gmax.assign(net.lv_max.size(), 0.0);
      gmin.assign(net.lv_min.size(), 0.0);
      double loss = member_nll(ens, int(k), buf, idx, &gt, &gmax, &gmin);
      if (trace) trace->member_nll[k].push_back(loss);
      net.adam_trunk.step(net.trunk.params, gt);
      net.adam_max.step(net.lv_max, gmax);
      net.adam_min.step(net.lv_min, gmin);
    }
  }
}

double uncertainty(const ConfidenceModel& model, const Vec& s, int action_dim) {
  std::vector<Vec> region;
  model.region(s, Vec(std::size_t(action_dim), 0.0), region);
  double worst = 0.0;
  for (std::size_t i = 0; i < region.size(); ++i)
    for (std::size_t j = i + 1; j < region.size(); ++j)
      worst = std::max(worst, std::sqrt(sqdist(region[i], region[j])));
  return worst;
}

double coverage(const ConfidenceModel& model,
                const std::vector<Transition>& transitions, double slack) {
  std::size_t in = 0;
  std::vector<Vec> region;
  for (const auto& t : transitions) {
    model.region(t.s, t.a, region);
    bool inside = true;
    for (std::size_t d = 0; d < t.next.size() && inside; ++d) {
      double lo = 1e300, hi = -1e300;
      for (const auto& m : region) {
        lo = std::min(lo, m[d]);
        hi = std::max(hi, m[d]);
      }
      inside = t.next[d] >= lo - slack && t.next[d] <= hi + slack;
    }
    if (inside) ++in;
  }
  return double(in) / double(transitions.size());
}

void ExactDynamics::mean_vjp(int, const Vec& s, const Vec& a, const Vec& v,
                             Vec& gs, Vec& ga) const {
  Matrix js, ja;
  step_jacobian(task, s, a, js, ja);
  js.add_transpose_apply(v, gs);
  ja.add_transpose_apply(v, ga);
}

namespace {
void rng_to_writer(const Rng& rng, ByteWriter& w) {
  for (auto word : rng.s) w.u64(word);
}
void rng_from_reader(Rng& rng, ByteReader& r) {
  for (auto& word : rng.s) word = r.u64();
}
}  // namespace

void ens_to_writer(const EnsembleDynamics& ens, ByteWriter& w) {
  w.magic("CRABSENS");
  w.u32(1);
  w.u32(std::uint32_t(ens.nets.size()));
  w.u32(std::uint32_t(ens.sdim));
  w.u32(std::uint32_t(ens.adim));
  w.f64(ens.bound_penalty);
  w.vec(ens.clip_lo);
  w.vec(ens.clip_hi);
  w.vec(ens.norm.mean);
  w.vec(ens.norm.stdev);
  for (const auto& net : ens.nets) {
    net_to_writer(net.trunk, w);
    w.vec(net.lv_max);
    w.vec(net.lv_min);
    adam_to_writer(net.adam_trunk, w);
    adam_to_writer(net.adam_max, w);
    adam_to_writer(net.adam_min, w);
    rng_to_writer(net.rng, w);
  }
}

EnsembleDynamics ens_from_reader(ByteReader& r) {
  r.expect_magic("CRABSENS");
  if (r.u32() != 1) throw std::runtime_error("unsupported ensemble version");
  EnsembleDynamics ens;
  std::uint32_t k = r.u32();
  ens.sdim = int(r.u32());
  ens.adim = int(r.u32());
  ens.bound_penalty = r.f64();
  ens.clip_lo = r.vec();
  ens.clip_hi = r.vec();
  ens.norm.mean = r.vec();
  ens.norm.stdev = r.vec();
  ens.nets.resize(k);
  for (auto& net : ens.nets) {
    net.trunk = net_from_reader(r);
    net.lv_max = r.vec();
    net.lv_min = r.vec();
    adam_from_reader(net.adam_trunk, r);
    adam_from_reader(net.adam_max, r);
    adam_from_reader(net.adam_min, r);
    rng_from_reader(net.rng, r);
  }
  return ens;
}

}  // namespace crabs
