#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crabs/common.hpp"
#include "crabs/rng.hpp"
#include "crabs/serialize.hpp"

namespace crabs {

enum class Activation : std::uint8_t { relu = 0, swish = 1, tanh = 2, identity = 3 };

double act_apply(Activation a, double z);
double act_derivative(Activation a, double z);

// Scratch buffers for one forward pass; reuse across calls to avoid churn.
// acts[0] is the input, acts[l+1] the output of layer l; pre[l] holds the
// pre-activation of layer l.
struct Workspace {
  std::vector<Vec> acts;
  std::vector<Vec> pre;
  Vec delta, delta_next;
};

// Fully connected net, 64-bit throughout. Parameters are stored flat,
// layer-major: weights row-major [out][in], then biases [out]. The hidden
// activation applies to every layer but the last; the output is linear.
struct Mlp {
  std::vector<int> sizes;
  Activation hidden_act = Activation::relu;
  Vec params;

  Mlp() = default;
  Mlp(std::vector<int> sizes_, Activation act);

  int param_count() const { return int(n_params_); }
  int in_dim() const { return sizes.front(); }
  int out_dim() const { return sizes.back(); }
  int layer_weight_offset(int l) const { return int(offsets_[l]); }

  // Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for weights and biases,
  // drawn layer by layer, weights before biases.
  void init(Rng& rng);

  // Returns the output and fills `ws` for a later backward call.
  const Vec& forward(const Vec& x, Workspace& ws) const;

  // Gradients of <upstream, f(x)> for the pass recorded in `ws`.
  // Parameter gradients accumulate into param_grad_acc (size param_count);
  // input_grad (size in_dim) is overwritten and may be null.
  void backward(const Workspace& ws, const Vec& upstream,
                double* param_grad_acc, double* input_grad) const;

 private:
  std::vector<std::size_t> offsets_;  // start of each layer's weight block
  std::size_t n_params_ = 0;
  void compute_offsets();
  friend Mlp load_net(const std::string&);
  friend Mlp net_from_reader(ByteReader&);
};

struct AdamState {
  double lr = 1e-3, weight_decay = 0.0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t steps_taken = 0, steps_rejected = 0;
  Vec m, v;

  void init(std::size_t n, double lr_, double wd) {
    lr = lr_;
    weight_decay = wd;
    m.assign(n, 0.0);
    v.assign(n, 0.0);
    steps_taken = steps_rejected = 0;
  }

  // One update with decoupled weight decay. A non-finite gradient is
  // rejected: no state changes except the rejection counter.
  bool step(Vec& params, const Vec& grad);
};

// Versioned net record: magic, version, architecture, little-endian params.
void save_net(const Mlp& net, const std::string& path);
Mlp load_net(const std::string& path);
void net_to_writer(const Mlp& net, ByteWriter& w);
Mlp net_from_reader(ByteReader& r);

void adam_to_writer(const AdamState& a, ByteWriter& w);
void adam_from_reader(AdamState& a, ByteReader& r);

}  // namespace crabs
