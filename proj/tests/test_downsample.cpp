#include <gtest/gtest.h>

#include <random>

#include "cml/downsample.hpp"
#include "oracles.hpp"

using namespace cml;

namespace {

Tensor5<double> run_block(DownsampleBlock<double>& blk, const Tensor5<double>& x, BnMode mode = BnMode::Train) {
  Tape<double> t;
  Binding<double> bind(t);
  return t.value(blk.forward(bind, t.constant(x), mode).y);
}

}  // namespace

TEST(Downsample, SingleStepCmlEqualsBaseline) {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> nd(0, 1);
  std::uniform_real_distribution<double> ud(0, 1);
  std::size_t spikes = 0, total = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t s = trial % 3 == 2 ? 3 : 2;
    const LifParams lp{1.0 + 3 * ud(rng), 0.5 + ud(rng), -0.3 * ud(rng)};
    DownsampleBlock<double> base(Variant::Baseline, 2, 3, 3, s, lp);
    std::mt19937_64 init(trial);
    base.convbn.init(init);
    for (auto& g : base.convbn.gamma.vec()) g = 1 + 0.5 * nd(rng);
    for (auto& b : base.convbn.beta.vec()) b = 1 + nd(rng);
    DownsampleBlock<double> cml(Variant::Cml, 2, 3, 3, s, lp);
    cml.convbn = base.convbn;
    auto x = oracle::randn({1, 2, 2, 4 * s, 2 * s}, rng, 0, 1 + 2 * ud(rng));
    const auto yb = run_block(base, x, trial % 2 ? BnMode::Train : BnMode::Eval);
    const auto yc = run_block(cml, x, trial % 2 ? BnMode::Train : BnMode::Eval);
    ASSERT_EQ(yb, yc) << "trial " << trial;
    spikes += static_cast<std::size_t>(sum(yb));
    total += yb.size();
  }
  // the comparison is not vacuous
  EXPECT_GT(spikes, total / 10);
  EXPECT_LT(spikes, total * 9 / 10);
}

TEST(Downsample, MultistepShapesAndBinary) {
  std::mt19937_64 rng(3);
  for (Variant v : kAllVariants) {
    DownsampleBlock<double> blk(v, 2, 4);
    blk.convbn.init(rng);
    auto x = oracle::randn({4, 2, 2, 8, 8}, rng, 1, 2);
    const auto y = run_block(blk, x);
    EXPECT_EQ(y.shape(), (Shape5{4, 2, 4, 4, 4})) << variant_name(v);
    EXPECT_EQ(y.shape(), blk.output_shape(x.shape()));
    for (double s : y.span()) ASSERT_TRUE(s == 0.0 || s == 1.0);
  }
}

TEST(Downsample, ParameterCountsEqual) {
  for (std::size_t s : {2, 3}) {
    const std::size_t n = DownsampleBlock<float>(Variant::Baseline, 3, 8, 3, s).parameter_count();
    for (Variant v : kAllVariants) EXPECT_EQ(DownsampleBlock<float>(v, 3, 8, 3, s).parameter_count(), n);
  }
}

TEST(Downsample, LifUpdateCounts) {
  const Shape5 in32{1, 1, 1, 32, 32};
  EXPECT_EQ(count_lif_updates(Variant::Baseline, in32, 1, 2), 1024u);
  EXPECT_EQ(count_lif_updates(Variant::Cml, in32, 1, 2), 256u);
  const Shape5 in64{1, 1, 1, 64, 64};
  EXPECT_EQ(count_lif_updates(Variant::Baseline, in64, 1, 4), 4096u);
  EXPECT_EQ(count_lif_updates(Variant::Cml, in64, 1, 4), 256u);
  for (std::size_t s : {1, 2, 3, 4, 8}) {
    const Shape5 in{4, 3, 2, 24 * s, 24 * s};
    EXPECT_EQ(count_lif_updates(Variant::Baseline, in, 5, s), s * s * count_lif_updates(Variant::Cml, in, 5, s));
  }
  // block overload agrees and counts channels of the block output
  DownsampleBlock<float> blk(Variant::Baseline, 2, 6);
  EXPECT_EQ(count_lif_updates(blk, {4, 1, 2, 16, 16}), 4u * 6 * 256);
}

TEST(Downsample, GradientReachesConvWeights) {
  std::mt19937_64 rng(5);
  for (Variant v : kAllVariants) {
    DownsampleBlock<double> blk(v, 2, 3);
    blk.convbn.init(rng);
    for (auto& b : blk.convbn.beta.vec()) b = 1.5;  // straddle threshold
    Tape<double> t;
    Binding<double> bind(t);
    auto tr = blk.forward(bind, t.constant(oracle::randn({2, 2, 2, 8, 8}, rng)), BnMode::Train);
    t.backward(tr.y);
    EXPECT_GT(max_abs(bind.grad(blk.convbn.weight)), 0.0) << variant_name(v);
  }
}

TEST(Downsample, IndivisibleInputRejected) {
  DownsampleBlock<double> blk(Variant::Cml, 1, 2, 3, 2);
  EXPECT_THROW(run_block(blk, Tensor5<double>({1, 1, 1, 7, 8})), ShapeError);
  DownsampleBlock<double> blk3(Variant::Baseline, 1, 2, 3, 3);
  EXPECT_THROW(run_block(blk3, Tensor5<double>({1, 1, 1, 8, 9})), ShapeError);
  EXPECT_THROW(run_block(blk, Tensor5<double>({1, 1, 2, 8, 8})), ShapeError);
}

TEST(Downsample, VariantNames) {
  for (Variant v : kAllVariants) EXPECT_EQ(parse_variant(variant_name(v)), v);
  EXPECT_FALSE(parse_variant("maxpool").has_value());
  EXPECT_STREQ(variant_label(Variant::Cml), "ConvBN-MaxPool-LIF");
}
