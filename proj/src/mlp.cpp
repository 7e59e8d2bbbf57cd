#include "crabs/mlp.hpp"

#include <cmath>
#include <cstring>

namespace crabs {

double act_apply(Activation a, double z) {
  switch (a) {
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::swish: return z * logistic(z);
    case Activation::tanh: return std::tanh(z);
    case Activation::identity: return z;
  }
  return z;
}

double act_derivative(Activation a, double z) {
  switch (a) {
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::swish: {
      double s = logistic(z);
      return s + z * s * (1.0 - s);
    }
    case Activation::tanh: {
      double t = std::tanh(z);
      return 1.0 - t * t;
    }
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

Mlp::Mlp(std::vector<int> sizes_, Activation act)
    : sizes(std::move(sizes_)), hidden_act(act) {
  if (sizes.size() < 2) throw std::runtime_error("net needs >= 2 layer sizes");
  for (int s : sizes)
    if (s <= 0) throw std::runtime_error("layer sizes must be positive");
  compute_offsets();
  params.assign(n_params_, 0.0);
}

void Mlp::compute_offsets() {
  offsets_.clear();
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    offsets_.push_back(off);
    off += std::size_t(sizes[l] + 1) * sizes[l + 1];
  }
  n_params_ = off;
}

void Mlp::init(Rng& rng) {
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    int in = sizes[l], out = sizes[l + 1];
    double bound = 1.0 / std::sqrt(double(in));
    double* w = params.data() + offsets_[l];
    for (int i = 0; i < in * out; ++i) w[i] = rng.uniform(-bound, bound);
    double* b = w + std::size_t(in) * out;
    for (int i = 0; i < out; ++i) b[i] = rng.uniform(-bound, bound);
  }
}

const Vec& Mlp::forward(const Vec& x, Workspace& ws) const {
  std::size_t L = sizes.size() - 1;
  ws.acts.resize(L + 1);
  ws.pre.resize(L);
  ws.acts[0] = x;
  for (std::size_t l = 0; l < L; ++l) {
    int in = sizes[l], out = sizes[l + 1];
    const double* w = params.data() + offsets_[l];
    const double* b = w + std::size_t(in) * out;
    const double* a = ws.acts[l].data();
    ws.pre[l].resize(out);
    ws.acts[l + 1].resize(out);
    double* z = ws.pre[l].data();
    for (int i = 0; i < out; ++i) {
      const double* wi = w + std::size_t(i) * in;
      double s = b[i];
      for (int j = 0; j < in; ++j) s += wi[j] * a[j];
      z[i] = s;
    }
    double* y = ws.acts[l + 1].data();
    if (l + 1 == L) {
      std::memcpy(y, z, sizeof(double) * out);
    } else {
      for (int i = 0; i < out; ++i) y[i] = act_apply(hidden_act, z[i]);
    }
  }
  return ws.acts[L];
}

void Mlp::backward(const Workspace& ws, const Vec& upstream,
                   double* param_grad_acc, double* input_grad) const {
  std::size_t L = sizes.size() - 1;
  Vec& delta = const_cast<Workspace&>(ws).delta;
  Vec& next = const_cast<Workspace&>(ws).delta_next;
  delta = upstream;  // output layer is linear
  for (std::size_t l = L; l-- > 0;) {
    int in = sizes[l], out = sizes[l + 1];
    const double* w = params.data() + offsets_[l];
    const double* a = ws.acts[l].data();
    if (param_grad_acc) {
      double* gw = param_grad_acc + offsets_[l];
      double* gb = gw + std::size_t(in) * out;
      for (int i = 0; i < out; ++i) {
        double d = delta[i];
        double* gwi = gw + std::size_t(i) * in;
        for (int j = 0; j < in; ++j) gwi[j] += d * a[j];
        gb[i] += d;
      }
    }
    bool need_input = (l > 0) || (input_grad != nullptr);
    if (!need_input) break;
    next.assign(in, 0.0);
    for (int i = 0; i < out; ++i) {
      double d = delta[i];
      const double* wi = w + std::size_t(i) * in;
      for (int j = 0; j < in; ++j) next[j] += d * wi[j];
    }
    if (l > 0) {
      const double* z = ws.pre[l - 1].data();
      for (int j = 0; j < in; ++j) next[j] *= act_derivative(hidden_act, z[j]);
    }
    std::swap(delta, next);
  }
  if (input_grad)
    std::memcpy(input_grad, delta.data(), sizeof(double) * sizes[0]);
}

bool AdamState::step(Vec& params, const Vec& grad) {
  if (params.size() != m.size() || grad.size() != m.size())
    throw std::runtime_error("adam state size mismatch");
  if (!all_finite(grad)) {
    ++steps_rejected;
    return false;
  }
  ++steps_taken;
  double c1 = 1.0 - std::pow(beta1, double(steps_taken));
  double c2 = 1.0 - std::pow(beta2, double(steps_taken));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
    double mhat = m[i] / c1;
    double vhat = v[i] / c2;
    params[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * params[i]);
  }
  return true;
}

static constexpr char kNetMagic[9] = "CRABSNET";
static constexpr std::uint32_t kNetVersion = 1;

void net_to_writer(const Mlp& net, ByteWriter& w) {
  w.magic(kNetMagic);
  w.u32(kNetVersion);
  w.u32(std::uint32_t(net.sizes.size()));
  for (int s : net.sizes) w.u32(std::uint32_t(s));
  w.u8(std::uint8_t(net.hidden_act));
  w.u64(std::uint64_t(net.param_count()));
  for (double p : net.params) w.f64(p);
}

Mlp net_from_reader(ByteReader& r) {
  r.expect_magic(kNetMagic);
  std::uint32_t version = r.u32();
  if (version != kNetVersion)
    throw std::runtime_error("unsupported net record version " +
                             std::to_string(version));
  std::uint32_t n = r.u32();
  if (n < 2 || n > 64) throw std::runtime_error("bad layer count in net record");
  std::vector<int> sizes(n);
  for (auto& s : sizes) {
    std::uint32_t v = r.u32();
    if (v == 0 || v > (1u << 20)) throw std::runtime_error("bad layer size");
    s = int(v);
  }
  std::uint8_t act = r.u8();
  if (act > 3) throw std::runtime_error("bad activation tag");
  Mlp net(sizes, Activation(act));
  std::uint64_t count = r.u64();
  if (count != std::uint64_t(net.param_count()))
    throw std::runtime_error("parameter count mismatch in net record");
  for (auto& p : net.params) p = r.f64();
  return net;
}

void save_net(const Mlp& net, const std::string& path) {
  ByteWriter w;
  net_to_writer(net, w);
  w.to_file(path);
}

Mlp load_net(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  Mlp net = net_from_reader(r);
  if (!r.done()) throw std::runtime_error("trailing bytes in net record");
  return net;
}

void adam_to_writer(const AdamState& a, ByteWriter& w) {
  w.f64(a.lr);
  w.f64(a.weight_decay);
  w.f64(a.beta1);
  w.f64(a.beta2);
  w.f64(a.eps);
  w.u64(std::uint64_t(a.steps_taken));
  w.u64(std::uint64_t(a.steps_rejected));
  w.vec(a.m);
  w.vec(a.v);
}

void adam_from_reader(AdamState& a, ByteReader& r) {
  a.lr = r.f64();
  a.weight_decay = r.f64();
  a.beta1 = r.f64();
  a.beta2 = r.f64();
  a.eps = r.f64();
  a.steps_taken = std::int64_t(r.u64());
  a.steps_rejected = std::int64_t(r.u64());
  a.m = r.vec();
  a.v = r.vec();
}

}  // namespace crabs
