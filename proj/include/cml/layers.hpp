// Trainable layers: ConvBN and the multistep LIF stage, plus the parameter
// binding that connects layer-owned tensors to tape leaves for one pass.
#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "cml/autodiff.hpp"
#include "cml/kernels.hpp"
#include "cml/lif.hpp"

namespace cml {

/// Maps layer-owned parameter tensors to the tape leaves created for them in
/// the current pass.
template <typename S>
class Binding {
 public:
  struct Slot {
    Tensor5<S>* param;
    Var var;
    std::string name;
  };

  explicit Binding(Tape<S>& tape) : tape_(tape) {}

  Tape<S>& tape() { return tape_; }

  Var bind(Tensor5<S>& param, std::string name) {
    for (const Slot& s : slots_)
      if (s.param == &param) return s.var;
    Var v = tape_.leaf(param, name);
    slots_.push_back({&param, v, std::move(name)});
    return v;
  }

  const std::vector<Slot>& slots() const { return slots_; }

  Tensor5<S> grad(const Tensor5<S>& param) const {
    for (const Slot& s : slots_)
      if (s.param == &param) return tape_.grad(s.var);
    throw std::logic_error("binding: parameter was not used in this pass");
  }

 private:
  Tape<S>& tape_;
  std::vector<Slot> slots_;
};

template <typename S>
struct ConvBn {
  Tensor5<S> weight;  // (1, Cout, Cin, k, k)
  Tensor5<S> gamma;   // (1, 1, Cout, 1, 1)
  Tensor5<S> beta;
  BnRunningStats<S> running;
  ConvSpec spec;
  BnConfig bn_cfg;

  ConvBn() = default;
  ConvBn(std::size_t cin, std::size_t cout, std::size_t k, ConvSpec s)
      : weight(conv_weight_shape(cout, cin, k, k)),
        gamma({1, 1, cout, 1, 1}, S(1)),
        beta({1, 1, cout, 1, 1}, S(0)),
        running(cout),
        spec(s) {}

  std::size_t in_channels() const { return weight.shape().c; }
  std::size_t out_channels() const { return weight.shape().b; }
  std::size_t kernel() const { return weight.shape().h; }

  /// He-normal conv init; gamma 1, beta 0.
  template <typename Rng>
  void init(Rng& rng) {
    const double fan_in = static_cast<double>(in_channels() * kernel() * kernel());
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / fan_in));
    for (auto& v : weight.vec()) v = static_cast<S>(nd(rng));
    gamma.fill(S(1));
    beta.fill(S(0));
    running = BnRunningStats<S>(out_channels());
  }

  std::size_t parameter_count() const { return weight.size() + gamma.size() + beta.size(); }

  /// batchnorm(conv2d(x)); time is folded into batch by both kernels.
  Var forward(Binding<S>& bind, Var x, BnMode mode, const std::string& prefix = "convbn") {
    Tape<S>& tape = bind.tape();
    Var w = bind.bind(weight, prefix + ".weight");
    Var g = bind.bind(gamma, prefix + ".gamma");
    Var b = bind.bind(beta, prefix + ".beta");
    Var y = ops::conv2d(tape, x, w, spec);
    return ops::batchnorm(tape, y, g, b, running, mode, bn_cfg);
  }
};

/// Conv with per-channel bias, the result of folding eval-mode BN into a conv.
template <typename S>
struct FoldedConv {
  Tensor5<S> weight;
  std::vector<S> bias;
  ConvSpec spec;
};

template <typename S>
FoldedConv<S> fold_batchnorm(const ConvBn<S>& cb) {
  FoldedConv<S> f{cb.weight, std::vector<S>(cb.out_channels()), cb.spec};
  const std::size_t per_out = cb.weight.size() / cb.out_channels();
  for (std::size_t c = 0; c < cb.out_channels(); ++c) {
    const double inv_std = 1.0 / std::sqrt(static_cast<double>(cb.running.var[c]) + cb.bn_cfg.eps);
    const double scale = static_cast<double>(cb.gamma[c]) * inv_std;
    for (std::size_t i = 0; i < per_out; ++i) f.weight[c * per_out + i] = static_cast<S>(cb.weight[c * per_out + i] * scale);
    f.bias[c] = static_cast<S>(cb.beta[c] - cb.running.mean[c] * scale);
  }
  return f;
}

template <typename S>
Tensor5<S> folded_conv_forward(ConstView<S> x, const FoldedConv<S>& f) {
  Tensor5<S> y = conv2d_forward<S>(x, f.weight, f.spec);
  const Shape5 s = y.shape();
  for (std::size_t n = 0; n < s.images(); ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      S* p = y.data() + (n * s.c + c) * s.plane();
      for (std::size_t i = 0; i < s.plane(); ++i) p[i] += f.bias[c];
    }
  return y;
}

/// Stateless multistep LIF stage; membrane starts at V_reset every call.
struct MultistepLif {
  LifParams params;
  SurrogateConfig surrogate;
  LifOptions options;

  template <typename S>
  Var forward(Tape<S>& tape, Var x, LifState<S>* state_out = nullptr) const {
    return ops::lif(tape, x, params, surrogate, options, state_out);
  }
};

}  // namespace cml
