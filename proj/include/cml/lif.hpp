// Multistep leaky integrate-and-fire neurons.
//
//   H[t] = V[t-1] + (X[t] - (V[t-1] - V_reset)) / tau
//   S[t] = Theta(H[t] - V_th)
//   V[t] = H[t] (1 - S[t]) + V_reset S[t]
//
// The time axis of the input tensor is iterated explicitly; the membrane
// starts at V_reset on every forward call.
#pragma once

#include <stdexcept>
#include <string>

#include "cml/surrogate.hpp"
#include "cml/tensor.hpp"

namespace cml {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LifParams {
  double tau = 2.0;
  double v_threshold = 1.0;
  double v_reset = 0.0;

  void validate() const {
    if (!(tau >= 1.0)) throw ConfigError("LIF: tau must be >= 1, got " + std::to_string(tau));
    if (!(v_threshold > v_reset)) {
      throw ConfigError("LIF: v_threshold (" + std::to_string(v_threshold) + ") must exceed v_reset (" +
                        std::to_string(v_reset) + ")");
    }
  }
};

enum class LifGradMode {
  /// Gradient flows only through the current step: dS[t]/dX[t] = Theta'(.)/tau.
  PerStep,
  /// Backpropagation through time, including the reset path of V.
  FullBptt,
};

/// Argument of the surrogate derivative.
enum class SurrogateArg {
  ThresholdOffset,  // Theta'(H[t] - V_th)
  PostSpikeOffset,  // Theta'(H[t] - V[t])
};

struct LifOptions {
  LifGradMode grad_mode = LifGradMode::PerStep;
  SurrogateArg surrogate_arg = SurrogateArg::ThresholdOffset;
};

template <typename S>
struct LifState {
  Tensor5<S> h;  // membrane before spike
  Tensor5<S> v;  // membrane after spike/reset
  Tensor5<S> s;  // spikes (binary unless soft_forward)
};

template <typename S>
struct LifForward {
  Tensor5<S> spikes;
  LifState<S> state;
};

template <typename S>
LifForward<S> multistep_lif_forward(ConstView<S> x, const LifParams& p, const SurrogateConfig& cfg) {
  p.validate();
  const Shape5& sh = x.shape;
  LifState<S> st{Tensor5<S>(sh), Tensor5<S>(sh), Tensor5<S>(sh)};
  const std::size_t n = sh.b * sh.c * sh.h * sh.w;
  const S inv_tau = static_cast<S>(1.0 / p.tau);
  const S vr = static_cast<S>(p.v_reset), vth = static_cast<S>(p.v_threshold);

  for (std::size_t t = 0; t < sh.t; ++t) {
    const std::size_t base = t * n;
    for (std::size_t i = 0; i < n; ++i) {
      const S v_prev = t == 0 ? vr : st.v[base - n + i];
      const S h = v_prev + inv_tau * (x[base + i] - (v_prev - vr));
      const S s = spike_fn(h - vth, cfg);
      st.h[base + i] = h;
      st.s[base + i] = s;
      st.v[base + i] = h * (S(1) - s) + vr * s;
    }
  }
  Tensor5<S> spikes = st.s;
  return {std::move(spikes), std::move(st)};
}

template <typename S>
S lif_surrogate_at(const LifState<S>& st, std::size_t idx, const LifParams& p, const SurrogateConfig& cfg,
                   SurrogateArg arg) {
  const S v = arg == SurrogateArg::ThresholdOffset ? st.h[idx] - static_cast<S>(p.v_threshold)
                                                   : st.h[idx] - st.v[idx];
  return surrogate_derivative(v, cfg);
}

template <typename S>
Tensor5<S> multistep_lif_backward(ConstView<S> grad_s, const LifState<S>& st, const LifParams& p,
                                  const SurrogateConfig& cfg, const LifOptions& opt = {}) {
  require_same_shape(grad_s.shape, st.h.shape(), "multistep_lif_backward");
  const Shape5& sh = grad_s.shape;
  Tensor5<S> gx(sh);
  const std::size_t n = sh.b * sh.c * sh.h * sh.w;
  const S inv_tau = static_cast<S>(1.0 / p.tau);

  if (opt.grad_mode == LifGradMode::PerStep) {
    for (std::size_t i = 0; i < sh.numel(); ++i) {
      gx[i] = grad_s.data[i] * inv_tau * lif_surrogate_at(st, i, p, cfg, opt.surrogate_arg);
    }
    return gx;
  }

  const S vr = static_cast<S>(p.v_reset);
  const S leak = S(1) - inv_tau;  // dH[t]/dV[t-1]
  std::vector<S> grad_v(n, S(0));   // dL/dV[t] flowing back from step t+1
  for (std::size_t t = sh.t; t-- > 0;) {
    const std::size_t base = t * n;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = base + i;
      const S ds_dh = lif_surrogate_at(st, k, p, cfg, opt.surrogate_arg);
      const S dv_dh = (S(1) - st.s[k]) + (vr - st.h[k]) * ds_dh;
      const S gh = grad_s.data[k] * ds_dh + grad_v[i] * dv_dh;
      gx[k] = gh * inv_tau;
      grad_v[i] = gh * leak;
    }
  }
  return gx;
}

}  // namespace cml
