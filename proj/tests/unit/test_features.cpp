#include <gtest/gtest.h>

#include "mfnet/features.hpp"
#include "test_util.hpp"

namespace {

using namespace mfnet;
using testutil::random_tensor;

BackboneConfig tiny(std::size_t c = 16, bool bias = false) {
  BackboneConfig b;
  b.kind = BackboneKind::tiny_random;
  b.output_channels = c;
  b.bias = bias;
  return b;
}

TEST(Backbone, DefaultConfigAt473GivesSixtyBySixtyBy256) {
  const Backbone<float> bb(BackboneConfig{});
  Tensor<float> img(473, 473, 3, 0.5f);
  const auto f = bb.extract(img);
  EXPECT_EQ(f.data.height(), 60u);
  EXPECT_EQ(f.data.width(), 60u);
  EXPECT_EQ(f.data.channels(), 256u);
}

TEST(Backbone, StrideFourDoublesResolution) {
  auto cfg = tiny();
  cfg.stride = 4;
  const Backbone<double> bb(cfg);
  EXPECT_EQ(bb.extract(Tensor<double>(32, 40, 3, 1.0)).data.shape(), (Shape{8, 10, 16}));
}

TEST(Backbone, SameImageTwiceIsIdentical) {
  const Backbone<double> bb(tiny());
  Rng rng(1);
  const auto img = random_tensor(rng, 24, 24, 3);
  EXPECT_EQ(bb.extract(img).data, bb.extract(img).data);
}

TEST(Backbone, ZeroImageBiasFreeGivesZeroMap) {
  const Backbone<double> bb(tiny(16, false));
  const auto f = bb.extract(Tensor<double>(24, 24, 3));
  for (double v : f.data.values()) EXPECT_EQ(v, 0.0);
}

TEST(Backbone, RejectsBadInput) {
  const Backbone<double> bb(tiny());
  EXPECT_THROW(bb.extract(Tensor<double>(24, 24, 1)), DataError);
  EXPECT_THROW(bb.extract(Tensor<double>(4, 24, 3)), DataError);
  Tensor<double> nan(24, 24, 3);
  nan[5] = std::nan("");
  EXPECT_THROW(bb.extract(nan), DataError);
}

TEST(Backbone, RejectsUnsupportedConfig) {
  auto cfg = tiny();
  cfg.stride = 16;
  EXPECT_THROW(Backbone<double>{cfg}, ConfigError);
  cfg = tiny();
  cfg.frozen = false;
  EXPECT_THROW(Backbone<double>{cfg}, ConfigError);
}

TEST(Multiscale, SingleScaleIsIdentity) {
  Rng rng(2);
  const FeatureMap<double> f{random_tensor(rng, 9, 7, 3), 1};
  const auto s = multiscale_query(f, 1);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].data, f.data);
}

TEST(Multiscale, ConstantMapStaysConstant) {
  const FeatureMap<double> f{Tensor<double>(60, 60, 4, 2.5), 1};
  for (std::size_t z = 1; z <= 4; ++z)
    for (const auto& s : multiscale_query(f, z))
      for (double v : s.data.values()) EXPECT_NEAR(v, 2.5, 1e-12);
}

TEST(Multiscale, SizesHalveWithCeil) {
  const auto sizes = scale_sizes(60, 60, 4);
  EXPECT_EQ(sizes, (std::vector<std::pair<std::size_t, std::size_t>>{{60, 60}, {30, 30}, {15, 15}, {8, 8}}));
  EXPECT_THROW(scale_sizes(1, 1, 2), ConfigError);
}

TEST(Multiscale, PoolingPreservesMeanAndChannels) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const std::size_t h = 5 + rng.uniform_index(30), w = 5 + rng.uniform_index(30);
    const FeatureMap<double> f{random_tensor(rng, h, w, 3), 1};
    for (const auto& s : multiscale_query(f, 3)) {
      EXPECT_EQ(s.data.channels(), 3u);
      for (std::size_t c = 0; c < 3; ++c) {
        double a = 0, b = 0;
        for (std::size_t i = 0; i < h * w; ++i) a += f.data[i * 3 + c];
        for (std::size_t i = 0; i < s.data.height() * s.data.width(); ++i) b += s.data[i * 3 + c];
        EXPECT_NEAR(a / static_cast<double>(h * w), b / static_cast<double>(s.data.height() * s.data.width()), 1e-5);
      }
    }
  }
}

TEST(MaskedPool, FullMaskIsSpatialMean) {
  Rng rng(4);
  const FeatureMap<double> f{random_tensor(rng, 6, 5, 3), 1};
  const auto p = masked_global_pool(f, LabelMap(12, 10, 1));
  EXPECT_FALSE(p.fallback);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t i = 0; i < 30; ++i) s += f.data[i * 3 + c];
    EXPECT_NEAR(p.data[c], s / 30, 1e-12);
  }
}

TEST(MaskedPool, SingleCellSelectsThatVector) {
  Rng rng(5);
  const FeatureMap<double> f{random_tensor(rng, 2, 2, 4), 1};
  LabelMap m(2, 2, 0);
  m.data[3] = 1;
  const auto p = masked_global_pool(f, m);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(p.data[c], f.data(1, 1, c));
}

TEST(MaskedPool, MatchesLoopOracleOnRandomInstances) {
  Rng rng(6);
  for (int t = 0; t < 50; ++t) {
    const FeatureMap<double> f{random_tensor(rng, 8, 8, 4), 1};
    LabelMap m(8, 8, 0);
    for (auto& v : m.data) v = rng.bernoulli(0.4) ? 1 : 0;
    m.data[rng.uniform_index(64)] = 1;
    std::vector<double> oracle(4, 0.0);
    double n = 0;
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x)
        if (m.at(y, x)) {
          n += 1;
          for (std::size_t c = 0; c < 4; ++c) oracle[c] += f.data(y, x, c);
        }
    const auto p = masked_global_pool(f, m);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_LT(std::abs(p.data[c] - oracle[c] / n), 1e-6);
  }
}

TEST(MaskedPool, StaysInsideForegroundHull) {
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    const FeatureMap<double> f{random_tensor(rng, 6, 6, 3), 1};
    LabelMap m(24, 24, 0);
    const std::size_t y0 = rng.uniform_index(20), x0 = rng.uniform_index(20);
    for (std::size_t y = y0; y < y0 + 4; ++y)
      for (std::size_t x = x0; x < x0 + 4; ++x) m.data[y * 24 + x] = 1;
    const auto fg = downsample_mask(m, 6, 6);
    const auto p = masked_global_pool(f, m);
    for (std::size_t c = 0; c < 3; ++c) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t i = 0; i < 36; ++i)
        if (fg[i]) lo = std::min(lo, f.data[i * 3 + c]), hi = std::max(hi, f.data[i * 3 + c]);
      EXPECT_GE(p.data[c], lo - 1e-12);
      EXPECT_LE(p.data[c], hi + 1e-12);
    }
  }
}

TEST(MaskedPool, ThinObjectSurvivesDownsampling) {
  LabelMap m(16, 16, 0);
  m.data[5 * 16 + 9] = 1;
  const auto fg = downsample_mask(m, 2, 2);
  EXPECT_EQ(fg, (std::vector<std::uint8_t>{0, 1, 0, 0}));
}

TEST(MaskedPool, EmptyMaskFallsBackToGlobalMean) {
  const FeatureMap<double> f{Tensor<double>(3, 3, 2, 4.0), 1};
  const auto p = masked_global_pool(f, LabelMap(3, 3, 0));
  EXPECT_TRUE(p.fallback);
  EXPECT_DOUBLE_EQ(p.data[0], 4.0);
}

}  // namespace
