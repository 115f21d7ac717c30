// Where does max-pool backward put the gradient?
//
// For each pooling window the probe runs the post-ConvBN stages of a Baseline
// or Cml block on a feature map x through the tape, back-propagates a seed,
// and records which x position received the (one-hot) gradient. The result
// is compared against a closed-form per-window oracle that never touches the
// tape or the pooling kernels:
//
//   Baseline: routed to the first spiking position of the window (row-major),
//             or to the window origin if nothing spikes.
//   Cml:      routed to the first maximal x of the window.
//   Magnitude in both cases: seed · Theta'(H - V_th) / tau, with H the
//   membrane of the neuron that produced the pooled output.
#pragma once

#include <cmath>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "cml/downsample.hpp"
#include "json.hpp"

namespace cml::probe {

struct OracleRouting {
  WindowOffset position;
  double magnitude = 0;
  /// Membrane H of the neuron whose spike was pooled / that sees the max.
  double membrane = 0;
  std::optional<WindowOffset> first_spike;  // Baseline only
  WindowOffset x_argmax;
};

/// Closed-form routing for one k×k window of x (row-major), fresh membrane,
/// hard-threshold forward, detached-reset backward, surrogate at H - V_th.
inline OracleRouting oracle_routing(Variant v, std::span<const double> window, std::size_t k, const LifParams& p,
                                    const SurrogateConfig& cfg, double seed = 1.0) {
  if (window.size() != k * k) throw ShapeError("oracle_routing: window has " + std::to_string(window.size()) + " values, expected k*k");
  if (v != Variant::Baseline && v != Variant::Cml) throw std::invalid_argument("oracle_routing: routing only defined for baseline and cml");

  auto membrane = [&](double xv) { return p.v_reset + xv / p.tau; };
  auto dtheta = [&](double u) {
    const double s = 1.0 / (1.0 + std::exp(-cfg.alpha * u));
    return cfg.alpha * s * (1.0 - s);
  };

  OracleRouting r;
  std::size_t best = 0;
  for (std::size_t i = 1; i < window.size(); ++i)
    if (window[i] > window[best]) best = i;
  r.x_argmax = {best / k, best % k};

  if (v == Variant::Baseline) {
    std::optional<std::size_t> first;
    for (std::size_t i = 0; i < window.size() && !first; ++i)
      if (membrane(window[i]) >= p.v_threshold) first = i;
    const std::size_t pos = first.value_or(0);
    if (first) r.first_spike = WindowOffset{*first / k, *first % k};
    r.position = {pos / k, pos % k};
    r.membrane = membrane(window[pos]);
  } else {
    r.position = r.x_argmax;
    r.membrane = membrane(window[best]);
  }
  r.magnitude = seed / p.tau * dtheta(r.membrane - p.v_threshold);
  return r;
}

struct RoutingRecord {
  std::size_t t = 0, b = 0, c = 0, i = 0, j = 0;
  WindowOffset x_argmax;
  std::optional<WindowOffset> first_spike;  // from the block's spike map h (Baseline)
  std::vector<WindowOffset> grad_positions;  // nonzero dL/dx inside the window
  double grad_value = 0;                     // at the routed position
  double surrogate_factor = 0;               // Theta' used by the tape at that neuron
  double seed = 0;
  std::optional<OracleRouting> oracle;       // fresh-state step (t = 0) only
  bool one_hot = false;
  bool matches_oracle_position = false;
  bool matches_oracle_magnitude = false;
  double magnitude_rel_err = 0;
  bool routes_to_argmax = false;
};

struct RoutingSummary {
  std::size_t windows = 0;
  std::size_t oracle_checked = 0;
  std::size_t oracle_position_agree = 0;
  std::size_t oracle_magnitude_agree = 0;
  std::size_t argmax_agree = 0;
  std::size_t one_hot = 0;
  std::size_t spiking_windows = 0;  // Baseline: windows of h with at least one spike
  double max_magnitude_rel_err = 0;
};

struct RoutingReport {
  Variant variant = Variant::Cml;
  bool applicable = true;
  std::string note;
  std::vector<RoutingRecord> records;
  RoutingSummary summary;
};

inline double relative_error(double a, double b) {
  const double d = std::abs(a - b);
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0 ? 0 : d / scale;
}

/// Runs x through the block's pool/LIF stages, seeds dL/dy, and records the
/// gradient routing of every pooling window.
inline RoutingReport analyze_routing(const DownsampleBlock<double>& block, const Tensor5<double>& x,
                                     const Tensor5<double>& seed, double magnitude_tol = 1e-10) {
  RoutingReport rep;
  rep.variant = block.variant;
  if (block.variant != Variant::Baseline && block.variant != Variant::Cml) {
    rep.applicable = false;
    rep.note = "not applicable: " + std::string(variant_name(block.variant)) +
               " has no max-pool stage, its gradient is dense";
    return rep;
  }
  if (block.pool.kernel != block.pool.stride) throw ShapeError("analyze_routing: overlapping windows not supported");

  Tape<double> tape;
  Var xv = tape.leaf(x, "x");
  BlockTrace<double> tr = block.forward_from_features(tape, xv);
  tape.backward(tr.y, seed);
  const Tensor5<double> gx = tape.grad(xv);
  const Tensor5<double>& h = tape.value(tr.mid);
  const Shape5 ys = tape.value(tr.y).shape();
  const std::size_t k = block.pool.kernel;
  const LifParams& lp = block.lif.params;
  const bool checkable = !block.lif.surrogate.soft_forward && block.lif.options.grad_mode == LifGradMode::PerStep &&
                         block.lif.options.surrogate_arg == SurrogateArg::ThresholdOffset;

  std::vector<double> window(k * k);
  for (std::size_t t = 0; t < ys.t; ++t)
    for (std::size_t b = 0; b < ys.b; ++b)
      for (std::size_t c = 0; c < ys.c; ++c)
        for (std::size_t i = 0; i < ys.h; ++i)
          for (std::size_t j = 0; j < ys.w; ++j) {
            RoutingRecord r;
            r.t = t, r.b = b, r.c = c, r.i = i, r.j = j;
            r.seed = seed.at(t, b, c, i, j);
            std::size_t best = 0;
            std::optional<std::size_t> first_spike;
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t w = 0; w < k; ++w) {
                const std::size_t q = u * k + w;
                window[q] = x.at(t, b, c, i * k + u, j * k + w);
                if (window[q] > window[best]) best = q;
                if (block.variant == Variant::Baseline && !first_spike && h.at(t, b, c, i * k + u, j * k + w) >= 0.5)
                  first_spike = q;
                const double g = gx.at(t, b, c, i * k + u, j * k + w);
                if (g != 0.0) {
                  r.grad_positions.push_back({u, w});
                  r.grad_value = g;
                }
              }
            r.x_argmax = {best / k, best % k};
            if (first_spike) r.first_spike = WindowOffset{*first_spike / k, *first_spike % k};
            r.one_hot = r.grad_positions.size() == 1;
            r.routes_to_argmax = r.one_hot && r.grad_positions[0] == r.x_argmax;

            // Membrane of the neuron feeding this pooled output.
            if (r.one_hot) {
              const auto [u, w] = r.grad_positions[0];
              const double hm = block.variant == Variant::Baseline ? tr.lif_state.h.at(t, b, c, i * k + u, j * k + w)
                                                                   : tr.lif_state.h.at(t, b, c, i, j);
              r.surrogate_factor = surrogate_derivative(hm - lp.v_threshold, block.lif.surrogate);
            }

            ++rep.summary.windows;
            if (first_spike) ++rep.summary.spiking_windows;
            if (r.one_hot) ++rep.summary.one_hot;
            if (r.routes_to_argmax) ++rep.summary.argmax_agree;

            if (t == 0 && checkable) {
              r.oracle = oracle_routing(block.variant, window, k, lp, block.lif.surrogate, r.seed);
              r.matches_oracle_position = r.one_hot && r.grad_positions[0] == r.oracle->position;
              r.magnitude_rel_err = relative_error(r.grad_value, r.oracle->magnitude);
              r.matches_oracle_magnitude = r.one_hot && r.magnitude_rel_err <= magnitude_tol;
              ++rep.summary.oracle_checked;
              if (r.matches_oracle_position) ++rep.summary.oracle_position_agree;
              if (r.matches_oracle_magnitude) ++rep.summary.oracle_magnitude_agree;
              rep.summary.max_magnitude_rel_err = std::max(rep.summary.max_magnitude_rel_err, r.magnitude_rel_err);
            }
            rep.records.push_back(std::move(r));
          }
  return rep;
}

struct MismatchResult {
  std::size_t windows = 0;
  double baseline_rate = 0;  // routed position != argmax of x
  double cml_rate = 0;
  double spike_rate = 0;     // fraction of full-resolution neurons spiking under Baseline
};

/// Fraction of windows whose gradient does not land on the argmax of x, for
/// the Baseline and Cml orderings of the same LIF parameters.
inline MismatchResult mismatch_rate(const Tensor5<double>& x, std::size_t stride, const LifParams& p = {},
                                    const SurrogateConfig& cfg = {}) {
  const std::size_t c = x.shape().c;
  DownsampleBlock<double> base(Variant::Baseline, c, c, 3, stride, p, cfg);
  DownsampleBlock<double> cml(Variant::Cml, c, c, 3, stride, p, cfg);
  if (x.shape().h % stride != 0 || x.shape().w % stride != 0) throw ShapeError("mismatch_rate: dims not divisible by stride");
  Tensor5<double> seed({x.shape().t, x.shape().b, c, x.shape().h / stride, x.shape().w / stride}, 1.0);

  const RoutingReport rb = analyze_routing(base, x, seed);
  const RoutingReport rc = analyze_routing(cml, x, seed);
  MismatchResult m;
  m.windows = rb.summary.windows;
  if (m.windows == 0) return m;
  m.baseline_rate = 1.0 - static_cast<double>(rb.summary.argmax_agree) / static_cast<double>(m.windows);
  m.cml_rate = 1.0 - static_cast<double>(rc.summary.argmax_agree) / static_cast<double>(m.windows);

  auto fwd = multistep_lif_forward<double>(x, p, cfg);
  m.spike_rate = sum(fwd.spikes) / static_cast<double>(fwd.spikes.size());
  return m;
}

/// Random feature maps for routing ensembles: Gaussian x with the given mean
/// and spread, shape (1, n, 1, s·rows, s·cols).
inline Tensor5<double> random_features(std::mt19937_64& rng, std::size_t n, std::size_t s, std::size_t rows,
                                       std::size_t cols, double mean, double stddev) {
  std::normal_distribution<double> nd(mean, stddev);
  Tensor5<double> x({1, n, 1, s * rows, s * cols});
  for (auto& v : x.vec()) v = nd(rng);
  return x;
}

struct EnsembleResult {
  std::size_t stride = 2;
  Tensor5<double> features;
  RoutingReport baseline;
  RoutingReport cml;
};

/// Routing of both orderings over `windows` random s×s windows (T = 1,
/// unit seed). Features are N(mean, stddev); mean 2, stddev 1.5 puts about
/// half the neurons over threshold at the default LIF parameters.
inline EnsembleResult routing_ensemble(std::uint64_t seed, std::size_t windows, std::size_t stride,
                                       double mean = 2.0, double stddev = 1.5, const LifParams& p = {},
                                       const SurrogateConfig& cfg = {}) {
  constexpr std::size_t side = 10;  // windows per row/col of each feature map
  const std::size_t maps = (windows + side * side - 1) / (side * side);
  std::mt19937_64 rng(seed);
  EnsembleResult r;
  r.stride = stride;
  r.features = random_features(rng, maps, stride, side, side, mean, stddev);
  const Tensor5<double> grad_seed({1, maps, 1, side, side}, 1.0);
  r.baseline = analyze_routing(DownsampleBlock<double>(Variant::Baseline, 1, 1, 3, stride, p, cfg), r.features, grad_seed);
  r.cml = analyze_routing(DownsampleBlock<double>(Variant::Cml, 1, 1, 3, stride, p, cfg), r.features, grad_seed);
  return r;
}

// ---------------------------------------------------------------------------
// JSON lines

inline nlohmann::json to_json(const WindowOffset& o) { return nlohmann::json::array({o.row, o.col}); }

inline nlohmann::json to_json(const RoutingRecord& r) {
  nlohmann::json j{{"t", r.t}, {"b", r.b}, {"c", r.c}, {"i", r.i}, {"j", r.j},
                   {"x_argmax", to_json(r.x_argmax)},
                   {"first_spike", r.first_spike ? to_json(*r.first_spike) : nlohmann::json(nullptr)},
                   {"grad_value", r.grad_value}, {"surrogate_factor", r.surrogate_factor}, {"seed", r.seed},
                   {"one_hot", r.one_hot}, {"routes_to_argmax", r.routes_to_argmax}};
  nlohmann::json pos = nlohmann::json::array();
  for (const auto& p : r.grad_positions) pos.push_back(to_json(p));
  j["grad_positions"] = pos;
  if (r.oracle) {
    j["oracle"] = {{"position", to_json(r.oracle->position)}, {"magnitude", r.oracle->magnitude},
                   {"membrane", r.oracle->membrane}};
    j["matches_oracle_position"] = r.matches_oracle_position;
    j["matches_oracle_magnitude"] = r.matches_oracle_magnitude;
    j["magnitude_rel_err"] = r.magnitude_rel_err;
  }
  return j;
}

inline nlohmann::json to_json(const RoutingReport& rep) {
  const auto& s = rep.summary;
  return {{"record", "summary"}, {"variant", variant_name(rep.variant)}, {"applicable", rep.applicable},
          {"note", rep.note}, {"windows", s.windows}, {"oracle_checked", s.oracle_checked},
          {"oracle_position_agree", s.oracle_position_agree}, {"oracle_magnitude_agree", s.oracle_magnitude_agree},
          {"argmax_agree", s.argmax_agree}, {"one_hot", s.one_hot}, {"spiking_windows", s.spiking_windows},
          {"max_magnitude_rel_err", s.max_magnitude_rel_err}};
}

/// One line per window followed by the summary line.
inline void write_jsonl(std::ostream& os, const RoutingReport& rep) {
  for (const auto& r : rep.records) {
    nlohmann::json j = to_json(r);
    j["record"] = "window";
    j["variant"] = variant_name(rep.variant);
    os << j.dump() << '\n';
  }
  os << to_json(rep).dump() << '\n';
}

}  // namespace cml::probe
