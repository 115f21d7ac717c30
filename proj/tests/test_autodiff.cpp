#include <gtest/gtest.h>

#include <random>

#include "cml/autodiff.hpp"
#include "cml/gradcheck.hpp"
#include "oracles.hpp"

using namespace cml;

TEST(Autodiff, MaxPoolGradientIsOneHotPerWindow) {
  std::mt19937_64 rng(1);
  auto xv = oracle::randn({2, 2, 3, 6, 6}, rng);
  Tape<double> tape;
  Var x = tape.leaf(xv);
  Var y = ops::maxpool(tape, x, PoolSpec::square(2));
  tape.backward(y);
  const auto g = tape.grad(x);
  const auto ref = oracle::maxpool(xv, 2);
  std::size_t o = 0;
  for (std::size_t n = 0; n < 12; ++n)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j, ++o) {
        int nonzero = 0;
        for (std::size_t u = 0; u < 2; ++u)
          for (std::size_t v = 0; v < 2; ++v) {
            const std::size_t r = 2 * i + u, c = 2 * j + v;
            const double gv = g[n * 36 + r * 6 + c];
            if (gv != 0) {
              ++nonzero;
              EXPECT_EQ(gv, 1.0);
              EXPECT_EQ(r, ref.arg_row[o]);
              EXPECT_EQ(c, ref.arg_col[o]);
            }
          }
        EXPECT_EQ(nonzero, 1);
      }
}

TEST(Autodiff, AvgPoolGradientQuarter) {
  Tape<double> tape;
  Var x = tape.leaf(Tensor5<double>({1, 2, 1, 4, 4}, 0.3));
  tape.backward(ops::avgpool(tape, x, PoolSpec::square(2)));
  const auto gx = tape.grad(x);
  for (double v : gx.vec()) EXPECT_EQ(v, 0.25);
}

TEST(Autodiff, ConvBnMaxPoolMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    auto xv = oracle::randn({2, 2, 2, 6, 6}, rng);
    auto wv = oracle::randn(conv_weight_shape(3, 2, 3, 3), rng, 0, 0.5);
    auto gv = oracle::randn({1, 1, 3, 1, 1}, rng, 1, 0.3);
    auto bv = oracle::randn({1, 1, 3, 1, 1}, rng);
    auto probe = oracle::randn({2, 2, 3, 3, 3}, rng);

    auto loss = [&]() {
      Tape<double> t;
      BnRunningStats<double> rs(3);
      Var y = ops::conv2d(t, t.constant(xv), t.constant(wv), {1, 1});
      y = ops::batchnorm(t, y, t.constant(gv), t.constant(bv), rs, BnMode::Train);
      y = ops::maxpool(t, y, PoolSpec::square(2));
      return t.value(ops::weighted_sum(t, y, probe))[0];
    };
    Tape<double> t;
    BnRunningStats<double> rs(3);
    Var x = t.leaf(xv), w = t.leaf(wv), g = t.leaf(gv), b = t.leaf(bv);
    Var y = ops::conv2d(t, x, w, {1, 1});
    y = ops::batchnorm(t, y, g, b, rs, BnMode::Train);
    y = ops::maxpool(t, y, PoolSpec::square(2));
    t.backward(ops::weighted_sum(t, y, probe));

    std::pair<Tensor5<double>*, Var> checks[] = {{&xv, x}, {&wv, w}, {&gv, g}, {&bv, b}};
    for (auto& [p, v] : checks) {
      const auto num = gradcheck::central_difference(loss, *p, 1e-5);
      const auto ana = t.grad(v);
      double norm = 0;
      for (std::size_t i = 0; i < num.size(); ++i) {
        EXPECT_LT(gradcheck::rel_error(ana[i], num[i]), 1e-6) << "seed " << seed << " entry " << i;
        norm += std::abs(ana[i]);
      }
      EXPECT_GT(norm, 0.0);
    }
  }
}

TEST(Autodiff, FanOutAccumulates) {
  std::mt19937_64 rng(2);
  auto xv = oracle::randn({1, 1, 1, 4, 4}, rng);
  auto w1 = oracle::randn({1, 1, 1, 4, 4}, rng), w2 = oracle::randn({1, 1, 1, 4, 4}, rng);
  Tape<double> t;
  Var x = t.leaf(xv);
  Var a = ops::weighted_sum(t, x, w1);
  Var b = ops::weighted_sum(t, x, w2);
  t.backward(ops::add(t, a, b));
  const auto g = t.grad(x);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g[i], w1[i] + w2[i]);
}

TEST(Autodiff, DetachStopsGradient) {
  Tape<double> t;
  Var x = t.leaf(Tensor5<double>({1, 1, 1, 2, 2}, 1.0));
  Var d = ops::detach(t, x);
  Var y = ops::add(t, d, d);
  t.backward(y);
  const auto gx = t.grad(x);
  for (double v : gx.vec()) EXPECT_EQ(v, 0.0);
  const auto gd = t.grad(d);
  for (double v : gd.vec()) EXPECT_EQ(v, 2.0);
}

TEST(Autodiff, SeedShapeMismatchThrows) {
  Tape<double> t;
  Var x = t.leaf(Tensor5<double>({1, 1, 1, 2, 2}));
  EXPECT_THROW(t.backward(x, Tensor5<double>({1, 1, 1, 2, 3})), ShapeError);
}

TEST(Autodiff, CrossEntropyLinearMeanTimeFiniteDifferences) {
  std::mt19937_64 rng(4);
  auto xv = oracle::randn({3, 2, 4, 2, 2}, rng);
  auto wv = oracle::randn({1, 1, 1, 5, 4}, rng);
  auto bv = oracle::randn({1, 1, 5, 1, 1}, rng);
  const std::vector<int> labels{1, 4};
  auto build = [&](Tape<double>& t, Var x, Var w, Var b) {
    Var p = ops::global_avg_pool(t, x);
    return ops::cross_entropy(t, ops::mean_time(t, ops::linear(t, p, w, b)), labels);
  };
  auto loss = [&]() {
    Tape<double> t;
    return t.value(build(t, t.constant(xv), t.constant(wv), t.constant(bv)))[0];
  };
  Tape<double> t;
  Var x = t.leaf(xv), w = t.leaf(wv), b = t.leaf(bv);
  t.backward(build(t, x, w, b));
  std::pair<Tensor5<double>*, Var> checks[] = {{&xv, x}, {&wv, w}, {&bv, b}};
  for (auto& [p, v] : checks) {
    const auto num = gradcheck::central_difference(loss, *p, 1e-5);
    const auto ana = t.grad(v);
    for (std::size_t i = 0; i < num.size(); ++i) EXPECT_LT(gradcheck::rel_error(ana[i], num[i]), 1e-8);
  }
}

TEST(Autodiff, RepeatTimeSumsGradients) {
  Tape<double> t;
  Var x = t.leaf(Tensor5<double>({1, 1, 1, 1, 3}, 1.0));
  Var y = ops::repeat_time(t, x, 4);
  EXPECT_EQ(t.value(y).shape().t, 4u);
  t.backward(y);
  const auto gx = t.grad(x);
  for (double v : gx.vec()) EXPECT_EQ(v, 4.0);
}

TEST(Surrogate, Values) {
  SurrogateConfig cfg;
  EXPECT_DOUBLE_EQ(surrogate_derivative(0.0, cfg), 1.0);
  EXPECT_NEAR(surrogate_derivative(0.5, cfg), 0.419974341614, 1e-12);
  EXPECT_NEAR(surrogate_derivative(0.5, cfg), oracle::sigmoid_surrogate(0.5, 4.0), 1e-15);
  EXPECT_LT(surrogate_derivative(1e3, cfg), 1e-300);
  EXPECT_LT(surrogate_derivative(-1e3, cfg), 1e-300);
  EXPECT_EQ(surrogate_derivative(0.37, cfg), surrogate_derivative(-0.37, cfg));
  std::mt19937_64 rng(0);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int i = 0; i < 1000; ++i) {
    const double v = u(rng);
    EXPECT_NEAR(surrogate_derivative(v, cfg), oracle::sigmoid_surrogate(v, 4.0), 1e-14);
  }
}

TEST(Surrogate, ForwardModes) {
  SurrogateConfig hard;
  auto soft = soft_forward_mode(hard, true);
  EXPECT_EQ(spike_fn(0.0, soft), 0.5);
  EXPECT_EQ(spike_fn(0.0, hard), 1.0);
  EXPECT_EQ(spike_fn(-1e-12, hard), 0.0);
  EXPECT_GT(spike_fn(1e-12, soft), 0.5);
}
