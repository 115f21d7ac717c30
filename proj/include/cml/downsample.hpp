// Downsampling cells: one stride-s spatial reduction built from ConvBN, a
// pooling stage and a multistep LIF stage, in one of four orderings.
//
//   Baseline    ConvBN -> LIF -> MaxPool     (pool over binary spikes)
//   Cml         ConvBN -> MaxPool -> LIF     (pool over real-valued features)
//   AvgPool     ConvBN -> AvgPool -> LIF
//   StrideConv  ConvBN(stride = s) -> LIF
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "cml/layers.hpp"

namespace cml {

enum class Variant { Baseline, Cml, AvgPool, StrideConv };

inline constexpr std::array<Variant, 4> kAllVariants = {Variant::Baseline, Variant::Cml, Variant::AvgPool,
                                                        Variant::StrideConv};

/// CLI spelling.
inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::Cml: return "cml";
    case Variant::AvgPool: return "avgpool";
    case Variant::StrideConv: return "strideconv";
  }
  return "?";
}

/// Stage ordering as written in comparison tables.
inline const char* variant_label(Variant v) {
  switch (v) {
    case Variant::Baseline: return "ConvBN-LIF-MaxPool";
    case Variant::Cml: return "ConvBN-MaxPool-LIF";
    case Variant::AvgPool: return "ConvBN-AvgPool-LIF";
    case Variant::StrideConv: return "ConvBN(stride=2)-LIF";
  }
  return "?";
}

inline std::optional<Variant> parse_variant(std::string_view s) {
  for (Variant v : kAllVariants)
    if (s == variant_name(v)) return v;
  return std::nullopt;
}

/// True when the LIF stage sees the full-resolution map.
inline constexpr bool lif_before_pool(Variant v) { return v == Variant::Baseline; }

/// Intermediates of one block pass: x is the ConvBN output, mid is the
/// output of the second stage (spike map h for Baseline, pooled x otherwise).
template <typename S>
struct BlockTrace {
  Var x;
  Var mid;
  Var y;
  LifState<S> lif_state;
};

template <typename S>
struct DownsampleBlock {
  Variant variant = Variant::Cml;
  ConvBn<S> convbn;
  PoolSpec pool = PoolSpec::square(2);
  MultistepLif lif;

  DownsampleBlock() = default;
  DownsampleBlock(Variant v, std::size_t cin, std::size_t cout, std::size_t kernel = 3, std::size_t stride = 2,
                  LifParams lp = {}, SurrogateConfig sc = {}, LifOptions lo = {})
      : variant(v),
        convbn(cin, cout, kernel,
               ConvSpec{v == Variant::StrideConv ? stride : 1, kernel / 2}),
        pool(PoolSpec::square(stride)),
        lif{lp, sc, lo} {}

  std::size_t stride() const { return pool.stride; }
  std::size_t parameter_count() const { return convbn.parameter_count(); }

  Shape5 output_shape(const Shape5& in) const {
    check_input(in);
    return {in.t, in.b, convbn.out_channels(), in.h / stride(), in.w / stride()};
  }

  void check_input(const Shape5& in) const {
    if (in.c != convbn.in_channels()) {
      throw ShapeError("downsample: expected " + std::to_string(convbn.in_channels()) + " input channels, got " +
                       in.str());
    }
    if (in.h % stride() != 0 || in.w % stride() != 0) {
      throw ShapeError("downsample: spatial dims " + std::to_string(in.h) + "x" + std::to_string(in.w) +
                       " not divisible by stride " + std::to_string(stride()));
    }
  }

  BlockTrace<S> forward(Binding<S>& bind, Var input, BnMode mode, const std::string& prefix = "block") {
    check_input(bind.tape().value(input).shape());
    Var x = convbn.forward(bind, input, mode, prefix + ".convbn");
    BlockTrace<S> tr = forward_from_features(bind.tape(), x);
    return tr;
  }

  /// Runs the stages after ConvBN on a given feature map x.
  BlockTrace<S> forward_from_features(Tape<S>& tape, Var x) const {
    BlockTrace<S> tr;
    tr.x = x;
    switch (variant) {
      case Variant::Baseline:
        tr.mid = lif.forward(tape, x, &tr.lif_state);
        tr.y = ops::maxpool(tape, tr.mid, pool);
        break;
      case Variant::Cml:
        tr.mid = ops::maxpool(tape, x, pool);
        tr.y = lif.forward(tape, tr.mid, &tr.lif_state);
        break;
      case Variant::AvgPool:
        tr.mid = ops::avgpool(tape, x, pool);
        tr.y = lif.forward(tape, tr.mid, &tr.lif_state);
        break;
      case Variant::StrideConv:
        tr.mid = x;
        tr.y = lif.forward(tape, x, &tr.lif_state);
        break;
    }
    return tr;
  }
};

/// Membrane updates performed by the block's LIF stage for one forward pass
/// on an input of shape `in` (T·B·C·positions).
inline std::uint64_t count_lif_updates(Variant v, const Shape5& in, std::size_t out_channels, std::size_t stride) {
  if (stride == 0) throw ShapeError("count_lif_updates: stride must be positive");
  const std::uint64_t per_map = lif_before_pool(v) ? std::uint64_t(in.h) * in.w
                                                   : std::uint64_t(in.h / stride) * (in.w / stride);
  return std::uint64_t(in.t) * in.b * out_channels * per_map;
}

template <typename S>
std::uint64_t count_lif_updates(const DownsampleBlock<S>& block, const Shape5& in) {
  return count_lif_updates(block.variant, in, block.convbn.out_channels(), block.stride());
}

}  // namespace cml
