// Central finite-difference gradient checking.
//
// The checker only evaluates the forward function; it shares no code with
// the reverse sweep it verifies.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cml/model.hpp"

namespace cml::gradcheck {

/// |a − n| / max(1, |a|, |n|)
inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

/// d f / d p[i] for every entry of `p`, by (f(p+eps) − f(p−eps)) / 2eps.
/// `p` is restored afterwards.
inline std::vector<double> central_difference(const std::function<double()>& f, Tensor5<double>& p, double eps) {
  std::vector<double> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + eps;
    const double fp = f();
    p[i] = orig - eps;
    const double fm = f();
    p[i] = orig;
    g[i] = (fp - fm) / (2 * eps);
  }
  return g;
}

struct TensorCheck {
  std::string name;
  std::size_t entries = 0;
  double max_rel_error = 0;
};

struct NetworkCheck {
  std::uint64_t seed = 0;
  Variant variant = Variant::Cml;
  std::vector<TensorCheck> tensors;
  double max_rel_error = 0;
};

struct NetworkCheckOptions {
  double eps = 1e-5;
  bool soft = true;
  std::size_t timesteps = 4;
  std::size_t image_size = 8;
  std::size_t batch = 2;
  std::size_t width1 = 2;
  std::size_t width2 = 3;
  std::size_t n_classes = 3;
};

/// Checks every parameter and the input image of a two-cell classifier.
/// The loss is cross-entropy on random labels; with `soft` the spike forward
/// is the sigmoid and the LIF backward is full BPTT, so the tape computes the
/// exact derivative of the forward.
inline NetworkCheck check_network(Variant variant, std::uint64_t seed, const NetworkCheckOptions& opt = {}) {
  ModelConfig mc;
  mc.variant = variant;
  mc.in_channels = 1;
  mc.width1 = opt.width1;
  mc.width2 = opt.width2;
  mc.n_classes = opt.n_classes;
  mc.timesteps = opt.timesteps;
  mc.surrogate = soft_forward_mode(mc.surrogate, opt.soft);
  if (opt.soft) mc.lif_options.grad_mode = LifGradMode::FullBptt;
  Classifier<double> model(mc, seed);

  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor5<double> images({1, opt.batch, 1, opt.image_size, opt.image_size});
  for (auto& v : images.vec()) v = nd(rng);
  std::vector<int> labels(opt.batch);
  for (auto& y : labels) y = static_cast<int>(rng() % opt.n_classes);
  // Scale BN so pre-activations straddle the threshold.
  for (auto* cell : {&model.cell1(), &model.cell2()})
    for (auto& b : cell->convbn.beta.vec()) b = 1.0 + 0.5 * nd(rng);

  auto loss_of = [&]() {
    Tape<double> tape;
    Binding<double> bind(tape);
    Var x = tape.constant(images);
    auto tr = model.forward(bind, x, BnMode::Train);
    return tape.value(ops::cross_entropy(tape, tr.logits, labels))[0];
  };

  // Analytic.
  Tape<double> tape;
  Binding<double> bind(tape);
  Var x = tape.leaf(images, "input");
  auto tr = model.forward(bind, x, BnMode::Train);
  Var loss = ops::cross_entropy(tape, tr.logits, labels);
  tape.backward(loss);

  NetworkCheck out;
  out.seed = seed;
  out.variant = variant;
  auto check = [&](const std::string& name, Tensor5<double>& p, const Tensor5<double>& analytic) {
    const auto numeric = central_difference(loss_of, p, opt.eps);
    TensorCheck tc{name, p.size(), 0};
    for (std::size_t i = 0; i < p.size(); ++i) tc.max_rel_error = std::max(tc.max_rel_error, rel_error(analytic[i], numeric[i]));
    out.max_rel_error = std::max(out.max_rel_error, tc.max_rel_error);
    out.tensors.push_back(tc);
  };
  const Tensor5<double> g_in = tape.grad(x);
  std::vector<std::pair<std::string, Tensor5<double>>> analytic;
  for (const auto& slot : bind.slots()) analytic.emplace_back(slot.name, bind.grad(*slot.param));
  for (std::size_t k = 0; k < bind.slots().size(); ++k) check(analytic[k].first, *bind.slots()[k].param, analytic[k].second);
  check("input", images, g_in);
  return out;
}

}  // namespace cml::gradcheck
