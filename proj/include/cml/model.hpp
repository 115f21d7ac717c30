// Two-cell spiking classifier used by the training harness:
//
//   image -> cell1 -> cell2 -> spatial mean -> linear -> mean over T -> logits
//
// The static image is presented at every time step. Because a convolution and
// batch statistics of T identical copies equal those of a single copy, the
// first ConvBN runs once and its output is replicated along T.
#pragma once

#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "cml/downsample.hpp"

namespace cml {

struct ModelConfig {
  Variant variant = Variant::Cml;
  std::size_t in_channels = 1;
  std::size_t width1 = 8;
  std::size_t width2 = 16;
  std::size_t n_classes = 4;
  std::size_t timesteps = 4;
  std::size_t kernel = 3;
  std::size_t stride = 2;
  LifParams lif;
  SurrogateConfig surrogate;
  LifOptions lif_options;
};

template <typename S>
struct ModelTrace {
  Var logits;
  BlockTrace<S> cell1;
  BlockTrace<S> cell2;
};

template <typename S>
class Classifier {
 public:
  Classifier() = default;
  Classifier(const ModelConfig& cfg, std::uint64_t seed)
      : cfg_(cfg),
        cell1_(cfg.variant, cfg.in_channels, cfg.width1, cfg.kernel, cfg.stride, cfg.lif, cfg.surrogate,
               cfg.lif_options),
        cell2_(cfg.variant, cfg.width1, cfg.width2, cfg.kernel, cfg.stride, cfg.lif, cfg.surrogate, cfg.lif_options),
        fc_w_({1, 1, 1, cfg.n_classes, cfg.width2}),
        fc_b_({1, 1, cfg.n_classes, 1, 1}) {
    if (cfg.timesteps == 0) throw ConfigError("model: timesteps must be positive");
    std::mt19937_64 rng(seed);
    cell1_.convbn.init(rng);
    cell2_.convbn.init(rng);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.width2));
    std::uniform_real_distribution<double> ud(-bound, bound);
    for (auto& v : fc_w_.vec()) v = static_cast<S>(ud(rng));
    for (auto& v : fc_b_.vec()) v = static_cast<S>(ud(rng));
  }

  const ModelConfig& config() const { return cfg_; }
  DownsampleBlock<S>& cell1() { return cell1_; }
  DownsampleBlock<S>& cell2() { return cell2_; }
  const DownsampleBlock<S>& cell1() const { return cell1_; }
  const DownsampleBlock<S>& cell2() const { return cell2_; }
  Tensor5<S>& fc_weight() { return fc_w_; }
  Tensor5<S>& fc_bias() { return fc_b_; }

  std::vector<Tensor5<S>*> parameters() {
    return {&cell1_.convbn.weight, &cell1_.convbn.gamma, &cell1_.convbn.beta, &cell2_.convbn.weight,
            &cell2_.convbn.gamma,  &cell2_.convbn.beta,  &fc_w_,              &fc_b_};
  }

  std::size_t parameter_count() const {
    return cell1_.parameter_count() + cell2_.parameter_count() + fc_w_.size() + fc_b_.size();
  }

  /// `images` is (1, B, C, H, W).
  ModelTrace<S> forward(Binding<S>& bind, Var images, BnMode mode) {
    Tape<S>& tape = bind.tape();
    const Shape5 in = tape.value(images).shape();
    if (in.t != 1) throw ShapeError("classifier: expects a static (T=1) image batch, got " + in.str());
    cell1_.check_input(in);

    ModelTrace<S> tr;
    Var x1 = cell1_.convbn.forward(bind, images, mode, "cell1.convbn");
    Var x1t = ops::repeat_time(tape, x1, cfg_.timesteps);
    tr.cell1 = cell1_.forward_from_features(tape, x1t);
    tr.cell2 = cell2_.forward(bind, tr.cell1.y, mode, "cell2");
    Var pooled = ops::global_avg_pool(tape, tr.cell2.y);
    Var w = bind.bind(fc_w_, "fc.weight");
    Var b = bind.bind(fc_b_, "fc.bias");
    Var per_step = ops::linear(tape, pooled, w, b);
    tr.logits = ops::mean_time(tape, per_step);
    return tr;
  }

  /// LIF membrane updates for one sample (both cells).
  std::uint64_t lif_updates_per_sample(std::size_t height, std::size_t width) const {
    const Shape5 s1{cfg_.timesteps, 1, cfg_.in_channels, height, width};
    const Shape5 s2{cfg_.timesteps, 1, cfg_.width1, height / cfg_.stride, width / cfg_.stride};
    return count_lif_updates(cell1_, s1) + count_lif_updates(cell2_, s2);
  }

 private:
  ModelConfig cfg_;
  DownsampleBlock<S> cell1_;
  DownsampleBlock<S> cell2_;
  Tensor5<S> fc_w_;
  Tensor5<S> fc_b_;
};

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { Adam, SgdMomentum };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.9;
};

template <typename S>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  /// Applies one update to each parameter given its gradient.
  void step(const std::vector<Tensor5<S>*>& params, const std::vector<Tensor5<S>>& grads) {
    if (params.size() != grads.size()) throw std::invalid_argument("optimizer: parameter/gradient count mismatch");
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->size(), 0.0);
        v_.emplace_back(p->size(), 0.0);
      }
    }
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor5<S>& p = *params[k];
      const Tensor5<S>& g = grads[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i];
        if (cfg_.kind == OptimizerKind::Adam) {
          m_[k][i] = cfg_.beta1 * m_[k][i] + (1 - cfg_.beta1) * gi;
          v_[k][i] = cfg_.beta2 * v_[k][i] + (1 - cfg_.beta2) * gi * gi;
          const double mh = m_[k][i] / bc1, vh = v_[k][i] / bc2;
          p[i] -= static_cast<S>(cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
        } else {
          m_[k][i] = cfg_.momentum * m_[k][i] + gi;
          p[i] -= static_cast<S>(cfg_.lr * m_[k][i]);
        }
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::size_t steps_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace cml
