// Heaviside spike function and its sigmoid surrogate.
#pragma once

#include <cmath>

namespace cml {

struct SurrogateConfig {
  /// Sharpness of the sigmoid surrogate.
  double alpha = 4.0;
  /// Forward pass uses sigmoid(alpha·v) instead of the hard step, making the
  /// forward consistent with the backward so finite differences apply.
  bool soft_forward = false;
};

inline SurrogateConfig soft_forward_mode(SurrogateConfig cfg, bool enabled) {
  cfg.soft_forward = enabled;
  return cfg;
}

template <typename S>
S sigmoid(S v) {
  // Evaluated on the side that cannot overflow.
  if (v >= S(0)) {
    const S e = std::exp(-v);
    return S(1) / (S(1) + e);
  }
  const S e = std::exp(v);
  return e / (S(1) + e);
}

/// Theta(v) = 1 for v >= 0.
template <typename S>
S heaviside(S v) {
  return v >= S(0) ? S(1) : S(0);
}

/// alpha·sigma(alpha·v)·(1 − sigma(alpha·v)); peak alpha/4 at v = 0.
template <typename S>
S surrogate_derivative(S v, const SurrogateConfig& cfg) {
  // sigma(x)(1 − sigma(x)) = e/(1+e)^2 with e = exp(−|x|): exactly symmetric
  // and free of cancellation in the tails.
  const S a = static_cast<S>(cfg.alpha);
  const S e = std::exp(-std::abs(a * v));
  return a * e / ((S(1) + e) * (S(1) + e));
}

/// Forward spike nonlinearity under the configured mode.
template <typename S>
S spike_fn(S v, const SurrogateConfig& cfg) {
  return cfg.soft_forward ? sigmoid(static_cast<S>(cfg.alpha) * v) : heaviside(v);
}

}  // namespace cml
