// Tape-based reverse-mode differentiation.
//
// Each op appends a node holding its value and a closure that, given the
// node's output gradient, accumulates into its inputs' gradients. Nodes are
// appended after their inputs, so walking the tape backwards is a valid
// reverse topological order.
#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cml/kernels.hpp"
#include "cml/lif.hpp"
#include "cml/tensor.hpp"

namespace cml {

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const { return id != static_cast<std::size_t>(-1); }
};

template <typename S>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor5<S>& grad_out)>;

  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor5<S> value;
    BackwardFn backward;
    bool is_leaf = false;
  };

  /// A leaf whose gradient is reported by backward().
  Var leaf(Tensor5<S> value, std::string name = "leaf") {
    return push(std::move(name), {}, std::move(value), nullptr, true);
  }
  /// A leaf excluded from gradient reporting (data, labels).
  Var constant(Tensor5<S> value) { return push("constant", {}, std::move(value), nullptr, false); }

  Var push(std::string op, std::vector<std::size_t> inputs, Tensor5<S> value, BackwardFn fn, bool leaf = false) {
    for (std::size_t in : inputs) {
      if (in >= nodes_.size()) throw std::logic_error("tape: input node " + std::to_string(in) + " not recorded");
    }
    nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(value), std::move(fn), leaf});
    grads_.clear();
    return Var{nodes_.size() - 1};
  }

  const Tensor5<S>& value(Var v) const { return node(v).value; }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw std::out_of_range("tape: unknown node");
    return nodes_[v.id];
  }
  std::size_t size() const { return nodes_.size(); }

  /// Runs the reverse sweep from `output` seeded with `seed`.
  void backward(Var output, const Tensor5<S>& seed) {
    const Node& out = node(output);
    if (!(seed.shape() == out.value.shape())) {
      throw ShapeError("backward: seed shape " + seed.shape().str() + " does not match output " +
                       out.value.shape().str());
    }
    grads_.assign(nodes_.size(), Tensor5<S>());
    grads_[output.id] = seed;
    for (std::size_t i = output.id + 1; i-- > 0;) {
      if (grads_[i].empty() && nodes_[i].value.size() != 0) continue;  // unreachable
      if (nodes_[i].backward) nodes_[i].backward(*this, grads_[i]);
    }
  }

  /// Seeds with ones.
  void backward(Var output) { backward(output, Tensor5<S>(node(output).value.shape(), S(1))); }

  /// Gradient of the last backward() output with respect to `v`; zeros if
  /// `v` was not reached.
  Tensor5<S> grad(Var v) const {
    const Node& n = node(v);
    if (grads_.empty()) throw std::logic_error("tape: grad() before backward()");
    if (grads_[v.id].empty()) return Tensor5<S>(n.value.shape());
    return grads_[v.id];
  }

  /// Adds `g` into the gradient slot of node `v`. Called by backward closures.
  void accumulate(Var v, const Tensor5<S>& g) {
    Tensor5<S>& slot = grads_[v.id];
    if (slot.empty()) {
      slot = g;
      return;
    }
    require_same_shape(slot.shape(), g.shape(), "tape accumulate");
    for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
  }
  void accumulate(Var v, Tensor5<S>&& g) {
    Tensor5<S>& slot = grads_[v.id];
    if (slot.empty()) {
      slot = std::move(g);
      return;
    }
    require_same_shape(slot.shape(), g.shape(), "tape accumulate");
    for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
  }

  void clear() {
    nodes_.clear();
    grads_.clear();
  }

 private:
  std::vector<Node> nodes_;
  std::vector<Tensor5<S>> grads_;
};

// ---------------------------------------------------------------------------
// Differentiable ops.

namespace ops {

template <typename S>
Var conv2d(Tape<S>& tape, Var x, Var w, ConvSpec spec) {
  Tensor5<S> y = conv2d_forward<S>(tape.value(x), tape.value(w), spec);
  return tape.push("conv2d", {x.id, w.id}, std::move(y), [x, w, spec](Tape<S>& tp, const Tensor5<S>& g) {
    const Tensor5<S>& xv = tp.value(x);
    const Tensor5<S>& wv = tp.value(w);
    tp.accumulate(x, conv2d_backward_input<S>(g, wv, xv.shape(), spec));
    tp.accumulate(w, conv2d_backward_weight<S>(g, xv, wv.shape(), spec));
  });
}

/// gamma/beta are (1,1,C,1,1) tensors. `running` is updated in train mode.
template <typename S>
Var batchnorm(Tape<S>& tape, Var x, Var gamma, Var beta, BnRunningStats<S>& running, BnMode mode,
              BnConfig cfg = {}) {
  auto fwd = batchnorm_forward<S>(tape.value(x), tape.value(gamma).span(), tape.value(beta).span(), running, mode, cfg);
  auto ctx = std::make_shared<BnContext<S>>(std::move(fwd.ctx));
  return tape.push("batchnorm", {x.id, gamma.id, beta.id}, std::move(fwd.out),
                   [x, gamma, beta, ctx](Tape<S>& tp, const Tensor5<S>& g) {
                     const Tensor5<S>& gm = tp.value(gamma);
                     auto grads = batchnorm_backward<S>(g, tp.value(x), gm.span(), *ctx);
                     tp.accumulate(x, std::move(grads.dx));
                     tp.accumulate(gamma, Tensor5<S>(gm.shape(), std::move(grads.dgamma)));
                     tp.accumulate(beta, Tensor5<S>(gm.shape(), std::move(grads.dbeta)));
                   });
}

template <typename S>
Var maxpool(Tape<S>& tape, Var x, PoolSpec spec) {
  auto r = maxpool_forward<S>(tape.value(x), spec);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(std::move(r.argmax));
  return tape.push("maxpool", {x.id}, std::move(r.out), [x, argmax](Tape<S>& tp, const Tensor5<S>& g) {
    tp.accumulate(x, maxpool_backward<S>(g, *argmax, tp.value(x).shape()));
  });
}

template <typename S>
Var avgpool(Tape<S>& tape, Var x, PoolSpec spec) {
  Tensor5<S> y = avgpool_forward<S>(tape.value(x), spec);
  return tape.push("avgpool", {x.id}, std::move(y), [x, spec](Tape<S>& tp, const Tensor5<S>& g) {
    tp.accumulate(x, avgpool_backward<S>(g, tp.value(x).shape(), spec));
  });
}

/// Multistep LIF. If `state_out` is given, the membrane record is copied out.
template <typename S>
Var lif(Tape<S>& tape, Var x, const LifParams& params, const SurrogateConfig& cfg, const LifOptions& opt = {},
        LifState<S>* state_out = nullptr) {
  auto fwd = multistep_lif_forward<S>(tape.value(x), params, cfg);
  if (state_out) *state_out = fwd.state;
  auto st = std::make_shared<LifState<S>>(std::move(fwd.state));
  return tape.push("lif", {x.id}, std::move(fwd.spikes), [x, st, params, cfg, opt](Tape<S>& tp, const Tensor5<S>& g) {
    tp.accumulate(x, multistep_lif_backward<S>(g, *st, params, cfg, opt));
  });
}

template <typename S>
Var add(Tape<S>& tape, Var a, Var b) {
  const Tensor5<S>& av = tape.value(a);
  const Tensor5<S>& bv = tape.value(b);
  require_same_shape(av.shape(), bv.shape(), "add");
  Tensor5<S> y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return tape.push("add", {a.id, b.id}, std::move(y), [a, b](Tape<S>& tp, const Tensor5<S>& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

/// Identity forward, no gradient to the input.
template <typename S>
Var detach(Tape<S>& tape, Var x) {
  return tape.push("detach", {x.id}, tape.value(x), nullptr);
}

/// Replicates a (1,B,C,H,W) tensor along time to (T,B,C,H,W).
template <typename S>
Var repeat_time(Tape<S>& tape, Var x, std::size_t steps) {
  const Tensor5<S>& xv = tape.value(x);
  if (xv.shape().t != 1) throw ShapeError("repeat_time: input must have T=1, got " + xv.shape().str());
  Shape5 s = xv.shape();
  s.t = steps;
  Tensor5<S> y(s);
  for (std::size_t t = 0; t < steps; ++t) std::copy(xv.vec().begin(), xv.vec().end(), y.vec().begin() + t * xv.size());
  return tape.push("repeat_time", {x.id}, std::move(y), [x, steps](Tape<S>& tp, const Tensor5<S>& g) {
    Tensor5<S> gx(tp.value(x).shape());
    const std::size_t n = gx.size();
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[t * n + i];
    tp.accumulate(x, std::move(gx));
  });
}

/// Mean over H×W: (T,B,C,H,W) -> (T,B,C,1,1).
template <typename S>
Var global_avg_pool(Tape<S>& tape, Var x) {
  const Tensor5<S>& xv = tape.value(x);
  const Shape5 is = xv.shape();
  Tensor5<S> y({is.t, is.b, is.c, 1, 1});
  const std::size_t plane = is.plane();
  const S inv = S(1) / static_cast<S>(plane);
  for (std::size_t p = 0; p < y.size(); ++p) {
    S acc = 0;
    for (std::size_t i = 0; i < plane; ++i) acc += xv[p * plane + i];
    y[p] = acc * inv;
  }
  return tape.push("global_avg_pool", {x.id}, std::move(y), [x, plane, inv](Tape<S>& tp, const Tensor5<S>& g) {
    Tensor5<S> gx(tp.value(x).shape());
    for (std::size_t p = 0; p < g.size(); ++p)
      for (std::size_t i = 0; i < plane; ++i) gx[p * plane + i] = g[p] * inv;
    tp.accumulate(x, std::move(gx));
  });
}

/// Fully connected layer on (T,B,Cin,1,1) features with weight (1,1,1,Cout,Cin)
/// and bias (1,1,Cout,1,1). Output (T,B,Cout,1,1).
template <typename S>
Var linear(Tape<S>& tape, Var x, Var w, Var bias) {
  const Tensor5<S>& xv = tape.value(x);
  const Tensor5<S>& wv = tape.value(w);
  const Tensor5<S>& bv = tape.value(bias);
  const Shape5 xs = xv.shape();
  const std::size_t cin = xs.c * xs.h * xs.w, cout = wv.shape().h;
  if (wv.shape().w != cin || bv.size() != cout) {
    throw ShapeError("linear: weight " + wv.shape().str() + " / bias " + bv.shape().str() +
                     " incompatible with input " + xs.str());
  }
  const std::size_t rows = xs.images();
  Tensor5<S> y({xs.t, xs.b, cout, 1, 1});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < cout; ++o) {
      S acc = bv[o];
      for (std::size_t i = 0; i < cin; ++i) acc += wv[o * cin + i] * xv[r * cin + i];
      y[r * cout + o] = acc;
    }
  return tape.push("linear", {x.id, w.id, bias.id}, std::move(y),
                   [x, w, bias, rows, cin, cout](Tape<S>& tp, const Tensor5<S>& g) {
                     const Tensor5<S>& xv = tp.value(x);
                     const Tensor5<S>& wv = tp.value(w);
                     Tensor5<S> gx(xv.shape()), gw(wv.shape()), gb(tp.value(bias).shape());
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t o = 0; o < cout; ++o) {
                         const S go = g[r * cout + o];
                         gb[o] += go;
                         for (std::size_t i = 0; i < cin; ++i) {
                           gw[o * cin + i] += go * xv[r * cin + i];
                           gx[r * cin + i] += go * wv[o * cin + i];
                         }
                       }
                     tp.accumulate(x, std::move(gx));
                     tp.accumulate(w, std::move(gw));
                     tp.accumulate(bias, std::move(gb));
                   });
}

/// Mean over the time axis: (T,B,C,H,W) -> (1,B,C,H,W).
template <typename S>
Var mean_time(Tape<S>& tape, Var x) {
  const Tensor5<S>& xv = tape.value(x);
  Shape5 s = xv.shape();
  const std::size_t steps = s.t, n = s.numel() / steps;
  s.t = 1;
  Tensor5<S> y(s);
  const S inv = S(1) / static_cast<S>(steps);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < n; ++i) y[i] += xv[t * n + i];
  for (auto& v : y.vec()) v *= inv;
  return tape.push("mean_time", {x.id}, std::move(y), [x, steps, n, inv](Tape<S>& tp, const Tensor5<S>& g) {
    Tensor5<S> gx(tp.value(x).shape());
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t i = 0; i < n; ++i) gx[t * n + i] = g[i] * inv;
    tp.accumulate(x, std::move(gx));
  });
}

/// Mean softmax cross-entropy of logits (1,B,K,1,1) against integer labels.
/// Output is a scalar tensor (1,1,1,1,1).
template <typename S>
Var cross_entropy(Tape<S>& tape, Var logits, std::span<const int> labels) {
  const Tensor5<S>& lv = tape.value(logits);
  const std::size_t B = lv.shape().images(), K = lv.shape().c * lv.shape().plane();
  if (labels.size() != B) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(B));
  }
  auto probs = std::make_shared<std::vector<S>>(B * K);
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const S* row = lv.data() + b * K;
    S m = row[0];
    for (std::size_t k = 1; k < K; ++k) m = std::max(m, row[k]);
    double z = 0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k] - m));
    for (std::size_t k = 0; k < K; ++k) (*probs)[b * K + k] = static_cast<S>(std::exp(static_cast<double>(row[k] - m)) / z);
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= K) throw std::out_of_range("cross_entropy: label out of range");
    loss += std::log(z) - static_cast<double>(row[y] - m);
  }
  Tensor5<S> out({1, 1, 1, 1, 1}, static_cast<S>(loss / static_cast<double>(B)));
  return tape.push("cross_entropy", {logits.id}, std::move(out), [logits, probs, lab, B, K](Tape<S>& tp, const Tensor5<S>& g) {
    Tensor5<S> gl(tp.value(logits).shape());
    const S scale = g[0] / static_cast<S>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k)
        gl[b * K + k] = scale * ((*probs)[b * K + k] - (static_cast<int>(k) == (*lab)[b] ? S(1) : S(0)));
    tp.accumulate(logits, std::move(gl));
  });
}

/// Scalar sum_i weights[i]·x[i]; a generic probe loss for gradient checks.
template <typename S>
Var weighted_sum(Tape<S>& tape, Var x, Tensor5<S> weights) {
  const Tensor5<S>& xv = tape.value(x);
  require_same_shape(xv.shape(), weights.shape(), "weighted_sum");
  S acc = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) acc += weights[i] * xv[i];
  auto wp = std::make_shared<Tensor5<S>>(std::move(weights));
  return tape.push("weighted_sum", {x.id}, Tensor5<S>({1, 1, 1, 1, 1}, acc), [x, wp](Tape<S>& tp, const Tensor5<S>& g) {
    Tensor5<S> gx = *wp;
    for (auto& v : gx.vec()) v *= g[0];
    tp.accumulate(x, std::move(gx));
  });
}

}  // namespace ops
}  // namespace cml
