#include <gtest/gtest.h>

#include <random>

#include "cml/kernels.hpp"
#include "oracles.hpp"

using namespace cml;

namespace {

Tensor5<double> window2(double a, double b, double c, double d) { return Tensor5<double>({1, 1, 1, 2, 2}, {a, b, c, d}); }

}  // namespace

TEST(Conv2d, OnesGiveNine) {
  Tensor5<double> x({1, 1, 1, 3, 3}, 1.0), w(conv_weight_shape(1, 1, 3, 3), 1.0);
  auto y = conv2d_forward<double>(x, w, {});
  ASSERT_EQ(y.shape(), (Shape5{1, 1, 1, 1, 1}));
  EXPECT_EQ(y[0], 9.0);
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(1);
  auto x = oracle::randn({2, 3, 1, 5, 4}, rng);
  Tensor5<double> w(conv_weight_shape(1, 1, 1, 1), 1.0);
  EXPECT_EQ(conv2d_forward<double>(x, w, {}), x);
}

TEST(Conv2d, MatchesLoopOracle) {
  std::mt19937_64 rng(7);
  auto x = oracle::randn({1, 1, 2, 4, 4}, rng);
  auto w = oracle::randn(conv_weight_shape(3, 2, 3, 3), rng);
  EXPECT_LT(oracle::max_rel_diff(conv2d_forward<double>(x, w, {}), oracle::conv2d(x, w, 1, 0)), 1e-12);
}

TEST(Conv2d, MatchesLoopOracleStridePad) {
  std::mt19937_64 rng(8);
  for (std::size_t stride : {1, 2, 3})
    for (std::size_t pad : {0, 1, 2}) {
      auto x = oracle::randn({2, 2, 4, 8, 7}, rng);
      auto w = oracle::randn(conv_weight_shape(3, 4, 3, 3), rng);
      auto y = conv2d_forward<double>(x, w, {stride, pad});
      auto ref = oracle::conv2d(x, w, stride, pad);
      ASSERT_EQ(y.shape(), ref.shape());
      EXPECT_LT(oracle::max_rel_diff(y, ref), 1e-10) << "stride " << stride << " pad " << pad;
    }
}

TEST(Conv2d, ShapeErrors) {
  Tensor5<double> x({1, 1, 2, 4, 4}), w(conv_weight_shape(1, 3, 3, 3));
  EXPECT_THROW(conv2d_forward<double>(x, w, {}), ShapeError);
  Tensor5<double> big(conv_weight_shape(1, 2, 5, 5));
  EXPECT_THROW(conv2d_forward<double>(x, big, {}), ShapeError);
}

TEST(MaxPool, WorkedWindows) {
  struct Case {
    Tensor5<double> x;
    double value;
    WindowOffset arg;
  };
  const Case cases[] = {
      {window2(0, 1, 1, 0), 1.0, {0, 1}},
      {window2(0, 0, 0, 0), 0.0, {0, 0}},
      {window2(0.3, 0.9, 1.2, 0.5), 1.2, {1, 0}},
  };
  for (const auto& c : cases) {
    auto r = maxpool_forward<double>(c.x, PoolSpec::square(2));
    EXPECT_EQ(r.out[0], c.value);
    EXPECT_EQ(window_offset(r.argmax[0], c.x.shape(), PoolSpec::square(2), 0, 0), c.arg);
  }
}

TEST(MaxPool, ArgmaxIsFirstMaximumOnRandomAndBinary) {
  std::mt19937_64 rng(3);
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 50; ++trial) {
    for (std::size_t s : {2, 3}) {
      Tensor5<double> x = oracle::randn({2, 2, 3, 6 * s / 2, 6 * s / 2}, rng);
      if (trial % 2) {
        for (auto& v : x.vec()) v = coin(rng) ? 1.0 : 0.0;
      }
      const Tensor5<double>& xr = x;
      auto got = maxpool_forward<double>(xr, PoolSpec::square(s));
      auto ref = oracle::maxpool(xr, s);
      ASSERT_EQ(got.out, ref.out);
      for (std::size_t o = 0; o < got.argmax.size(); ++o) {
        const std::size_t plane = got.argmax[o] % (xr.shape().h * xr.shape().w);
        EXPECT_EQ(plane / xr.shape().w, ref.arg_row[o]);
        EXPECT_EQ(plane % xr.shape().w, ref.arg_col[o]);
      }
    }
  }
}

TEST(AvgPool, Examples) {
  EXPECT_EQ(avgpool_forward<double>(window2(0, 1, 1, 0), PoolSpec::square(2))[0], 0.5);
  EXPECT_EQ(avgpool_forward<double>(window2(3.25, 3.25, 3.25, 3.25), PoolSpec::square(2))[0], 3.25);
  std::mt19937_64 rng(11);
  auto x = oracle::randn({2, 2, 4, 8, 8}, rng);
  EXPECT_LT(oracle::max_rel_diff(avgpool_forward<double>(x, PoolSpec::square(2)), oracle::avgpool(x, 2)), 1e-10);
}

TEST(AvgPool, BackwardSpreadsQuarter) {
  Tensor5<double> g({1, 1, 1, 2, 2}, 1.0);
  auto gx = avgpool_backward<double>(g, {1, 1, 1, 4, 4}, PoolSpec::square(2));
  for (double v : gx.span()) EXPECT_EQ(v, 0.25);
}

TEST(BatchNorm, IdentityOnStandardizedInput) {
  std::mt19937_64 rng(5);
  auto x = oracle::randn({1, 64, 2, 4, 4}, rng);
  // standardize exactly per channel
  x = oracle::batchnorm(x, {1, 1}, {0, 0}, 0.0);
  BnRunningStats<double> rs(2);
  std::vector<double> g{1, 1}, b{0, 0};
  auto y = batchnorm_forward<double>(x, g, b, rs, BnMode::Train);
  // equal up to the eps term: y = x / sqrt(1 + eps)
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(y.out[i], x[i] / std::sqrt(1 + 1e-5), 1e-12);
    EXPECT_LT(std::abs(y.out[i] - x[i]), 1e-6 + 5.1e-6 * std::abs(x[i]));
  }
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  std::mt19937_64 rng(6);
  auto x = oracle::randn({2, 3, 3, 4, 4}, rng);
  BnRunningStats<double> rs(3);
  std::vector<double> g{0, 0, 0}, b{0.5, -1.0, 2.0};
  auto y = batchnorm_forward<double>(x, g, b, rs, BnMode::Train);
  for (std::size_t n = 0; n < 6; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y.out[(n * 3 + c) * 16 + i], b[c]);
}

TEST(BatchNorm, StatisticsAndOracle) {
  std::mt19937_64 rng(9);
  auto x = oracle::randn({2, 2, 4, 8, 8}, rng, 3.0, 2.5);
  BnRunningStats<double> rs(4);
  std::vector<double> g(4, 1.0), b(4, 0.0);
  auto y = batchnorm_forward<double>(x, g, b, rs, BnMode::Train);
  const std::size_t per = 4 * 64;
  for (std::size_t c = 0; c < 4; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 64; ++i) m += y.out[(n * 4 + c) * 64 + i];
    m /= per;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 64; ++i) v += std::pow(y.out[(n * 4 + c) * 64 + i] - m, 2);
    v /= per;
    EXPECT_LT(std::abs(m), 1e-6);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
  std::vector<double> g2{0.5, 1.5, -1, 2}, b2{0.1, 0.2, 0.3, 0.4};
  BnRunningStats<double> rs2(4);
  auto y2 = batchnorm_forward<double>(x, g2, b2, rs2, BnMode::Train);
  EXPECT_LT(oracle::max_rel_diff(y2.out, oracle::batchnorm(x, g2, b2, 1e-5)), 1e-10);
}

TEST(BatchNorm, RunningStatsMomentum) {
  Tensor5<double> x({1, 2, 1, 1, 2}, {1, 3, 5, 7});  // mean 4, unbiased var 20/3
  BnRunningStats<double> rs(1);
  std::vector<double> g{1}, b{0};
  batchnorm_forward<double>(x, g, b, rs, BnMode::Train);
  EXPECT_DOUBLE_EQ(rs.mean[0], 0.1 * 4.0);
  EXPECT_DOUBLE_EQ(rs.var[0], 0.9 + 0.1 * 20.0 / 3.0);
}

TEST(BatchNorm, Errors) {
  BnRunningStats<double> rs(2);
  std::vector<double> g{1}, b{0};
  EXPECT_THROW(batchnorm_forward<double>(Tensor5<double>({1, 1, 2, 2, 2}), g, b, rs, BnMode::Train), ShapeError);
  std::vector<double> g2{1, 1}, b2{0, 0};
  EXPECT_THROW(batchnorm_forward<double>(Tensor5<double>({1, 0, 2, 2, 2}), g2, b2, rs, BnMode::Train), ShapeError);
}

TEST(Kernels, PureAndDeterministic) {
  std::mt19937_64 rng(13);
  auto x = oracle::randn({2, 2, 3, 8, 8}, rng);
  auto w = oracle::randn(conv_weight_shape(4, 3, 3, 3), rng);
  const auto x0 = x, w0 = w;
  EXPECT_EQ(conv2d_forward<double>(x, w, {1, 1}), conv2d_forward<double>(x, w, {1, 1}));
  auto a = maxpool_forward<double>(x, PoolSpec::square(2));
  auto b = maxpool_forward<double>(x, PoolSpec::square(2));
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(a.argmax, b.argmax);
  EXPECT_EQ(avgpool_forward<double>(x, PoolSpec::square(2)), avgpool_forward<double>(x, PoolSpec::square(2)));
  EXPECT_EQ(x, x0);
  EXPECT_EQ(w, w0);
}

TEST(Tensor, FoldingIsAView) {
  Tensor5<float> t({3, 2, 1, 2, 2});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = float(i);
  auto v = fold_time(t);
  EXPECT_EQ(v.shape, (Shape5{1, 6, 1, 2, 2}));
  EXPECT_EQ(v.data.data(), t.data());
  const Shape5 fs{1, 6, 1, 2, 2};
  EXPECT_EQ(t.at(2, 1, 0, 1, 0), v[fs.offset(0, 5, 0, 1, 0)]);
  EXPECT_THROW(t.reshaped({1, 1, 1, 1, 5}), ShapeError);
}
