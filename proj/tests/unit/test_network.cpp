#include <gtest/gtest.h>

#include "../oracles.hpp"
#include "mfnet/network.hpp"
#include "test_util.hpp"

namespace {

using namespace mfnet;
using testutil::random_tensor;

ModelConfig small(std::size_t ways = 2, std::size_t z = 2, FusionMode fusion = FusionMode::AC) {
  ModelConfig m;
  m.ways = ways;
  m.scales = z;
  m.relation_groups = 2;
  m.fusion = fusion;
  m.backbone.kind = BackboneKind::tiny_random;
  m.backbone.output_channels = 8;
  return m;
}

std::vector<ad::Var<double>> random_scales(Rng& rng, std::size_t z, std::size_t c, std::size_t h, std::size_t w) {
  std::vector<ad::Var<double>> out;
  for (const auto& [sh, sw] : scale_sizes(h, w, z)) out.push_back(ad::constant(random_tensor(rng, sh, sw, c)));
  return out;
}

std::vector<ad::Var<double>> random_protos(Rng& rng, std::size_t n, std::size_t c) {
  std::vector<ad::Var<double>> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(ad::constant(random_tensor(rng, 1, 1, c)));
  return out;
}

TEST(Encode, ZeroPrototypeSingleScaleIsTransformOfQuery) {
  const Model<double> m(small(1, 1));
  Rng rng(1);
  const auto q = random_scales(rng, 1, 8, 5, 5);
  const auto emb = encode(m, q, {ad::constant(Tensor<double>(1, 1, 8))});
  EXPECT_EQ(emb.data->value, scale_attention(q[0], m.scale_attention_params()).transformed->value);
}

TEST(Encode, TwoWayDefaultsGive512Channels) {
  ModelConfig cfg;
  cfg.ways = 2;
  const Model<float> m(cfg);
  Rng rng(2);
  std::vector<ad::Var<float>> q;
  for (const auto& [h, w] : scale_sizes(8, 8, 4)) q.push_back(ad::constant(Tensor<float>(h, w, 256, 0.1f)));
  const auto emb = encode(m, q, {ad::constant(Tensor<float>(1, 1, 256, 0.2f)), ad::constant(Tensor<float>(1, 1, 256, -0.1f))});
  EXPECT_EQ(emb.data->value.channels(), 512u);
  EXPECT_EQ(emb.class_order, (std::vector<std::size_t>{1, 2}));
}

TEST(Encode, AddConcatMatchesHandComposition) {
  const Model<double> m(small(2, 3));
  Rng rng(3);
  for (int t = 0; t < 5; ++t) {
    const auto q = random_scales(rng, 3, 8, 9, 7);
    const auto p = random_protos(rng, 2, 8);
    const auto emb = encode(m, q, p).data->value;
    const auto& sa = m.scale_attention_params();
    for (std::size_t n = 0; n < 2; ++n) {
      std::vector<Tensor<double>> attn, feats;
      for (const auto& qz : q) {
        Tensor<double> x = qz->value;
        for (std::size_t y = 0; y < x.height(); ++y)
          for (std::size_t xx = 0; xx < x.width(); ++xx)
            for (std::size_t c = 0; c < 8; ++c) x(y, xx, c) += p[n]->value[c];
        const auto b = scale_attention(ad::constant(x), sa);
        attn.push_back(b.attn->value);
        feats.push_back(b.transformed->value);
      }
      const auto o = oracle::combine_scales(attn, feats, 9, 7);
      for (std::size_t y = 0; y < 9; ++y)
        for (std::size_t x = 0; x < 7; ++x)
          for (std::size_t c = 0; c < 8; ++c) EXPECT_LT(std::abs(emb(y, x, n * 8 + c) - o(y, x, c)), 1e-6);
    }
  }
}

TEST(Encode, FusionModesSetEmbeddingWidth) {
  Rng rng(4);
  const auto q = random_scales(rng, 2, 8, 6, 6);
  const auto p = random_protos(rng, 3, 8);
  for (auto [mode, width] : {std::pair{FusionMode::AC, 24u}, std::pair{FusionMode::CC, 24u},
                             std::pair{FusionMode::AA, 8u}, std::pair{FusionMode::CA, 8u}}) {
    const Model<double> m(small(3, 2, mode));
    const auto emb = encode(m, q, p);
    EXPECT_EQ(emb.data->value.channels(), width) << to_string(mode);
    EXPECT_EQ(m.decoder_input_channels(3), width);
    EXPECT_EQ(decode(m, emb, 12, 12).probs->value.channels(), 4u);
  }
}

TEST(Encode, ClassOrderPermutesChannelBlocks) {
  const Model<double> m(small(3, 2));
  Rng rng(5);
  const auto q = random_scales(rng, 2, 8, 6, 6);
  const auto p = random_protos(rng, 3, 8);
  const auto a = encode(m, q, p).data->value;
  const auto b = encode(m, q, {p[2], p[0], p[1]}).data->value;
  const std::size_t from[] = {2, 0, 1};
  for (std::size_t i = 0; i < 36; ++i)
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(b[i * 24 + n * 8 + c], a[i * 24 + from[n] * 8 + c]);
}

TEST(Decode, PermutingDecoderInputAlsoPermutesLogits) {
  Model<double> m(small(2, 2));
  Rng rng(6);
  const auto q = random_scales(rng, 2, 8, 6, 6);
  const auto p = random_protos(rng, 2, 8);
  const auto a = decode(m, encode(m, q, p), 6, 6);
  // Swap the reduce conv's input blocks and the classifier's foreground rows.
  Model<double> swapped = m;
  auto& dec = const_cast<Decoder<double>&>(swapped.decoder(2));
  dec.reduce.weight = ad::parameter(dec.reduce.weight->value);
  dec.classify.weight = ad::parameter(dec.classify.weight->value);
  dec.classify.bias = ad::parameter(dec.classify.bias->value);
  auto& rw = dec.reduce.weight->value;
  for (std::size_t o = 0; o < rw.height(); ++o)
    for (std::size_t c = 0; c < 8; ++c) std::swap(rw(o, 0, c), rw(o, 0, 8 + c));
  auto& cw = dec.classify.weight->value;
  for (std::size_t c = 0; c < cw.channels(); ++c) std::swap(cw(1, 0, c), cw(2, 0, c));
  std::swap(dec.classify.bias->value[1], dec.classify.bias->value[2]);
  const auto b = decode(swapped, encode(swapped, q, {p[1], p[0]}), 6, 6);
  for (std::size_t i = 0; i < 36; ++i) {
    EXPECT_NEAR(b.logits->value[i * 3], a.logits->value[i * 3], 1e-12);
    EXPECT_NEAR(b.logits->value[i * 3 + 1], a.logits->value[i * 3 + 2], 1e-12);
    EXPECT_NEAR(b.logits->value[i * 3 + 2], a.logits->value[i * 3 + 1], 1e-12);
  }
}

TEST(Decode, ProbsAreASimplexAfterUpsampling) {
  const Model<double> m(small(2, 2));
  Rng rng(7);
  for (int t = 0; t < 5; ++t) {
    const auto pred = decode(m, encode(m, random_scales(rng, 2, 8, 5, 4), random_protos(rng, 2, 8)), 37, 29);
    EXPECT_EQ(pred.probs->value.shape(), (Shape{37, 29, 3}));
    EXPECT_EQ(pred.logits->value.channels(), 3u);
    for (std::size_t i = 0; i < 37 * 29; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < 3; ++c) s += pred.probs->value[i * 3 + c];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Decode, EmbeddingTapAtDefaultsIsSixtyBySixtyBy256) {
  ModelConfig cfg;
  const Model<float> m(cfg);
  QuerySupportEmbedding<float> emb{ad::constant(Tensor<float>(60, 60, 512, 0.01f)), {1, 2}};
  const auto pred = decode(m, emb, 60, 60);
  EXPECT_EQ(pred.embedding->value.shape(), (Shape{60, 60, 256}));
}

TEST(Decode, MissingHeadIsAnError) {
  const Model<double> m(small(2, 2));
  Rng rng(8);
  const auto emb = encode(m, random_scales(rng, 2, 8, 4, 4), random_protos(rng, 3, 8));
  EXPECT_THROW(decode(m, emb, 4, 4), ConfigError);
}

class Episode2Way : public ::testing::Test {
 protected:
  Rng rng{9};
  std::vector<std::vector<SupportShot<double>>> support(std::size_t ways, std::size_t shots) {
    std::vector<std::vector<SupportShot<double>>> s(ways);
    for (auto& cls : s)
      for (std::size_t k = 0; k < shots; ++k) {
        LabelMap mask(32, 32, 0);
        for (std::size_t i = 0; i < 300; ++i) mask.data[rng.uniform_index(mask.size())] = 1;
        cls.push_back({random_tensor(rng, 32, 32, 3), mask});
      }
    return s;
  }
};

TEST_F(Episode2Way, DeterministicWithProbsAtQuerySize) {
  const Model<double> m(small(2, 2));
  const auto q = random_tensor(rng, 40, 32, 3);
  const auto s = support(2, 1);
  const auto a = forward_episode(m, q, s), b = forward_episode(m, q, s);
  EXPECT_EQ(a.probs->value.shape(), (Shape{40, 32, 3}));
  EXPECT_EQ(a.probs->value, b.probs->value);
  EXPECT_EQ(a.logits->value, b.logits->value);
  EXPECT_EQ(a.embedding->value, b.embedding->value);
}

TEST_F(Episode2Way, SingleScaleIgnoresAttentionSwitch) {
  auto cfg = small(2, 1);
  const Model<double> with(cfg);
  cfg.use_scale_attention = false;
  const Model<double> without(cfg);
  const auto q = random_tensor(rng, 32, 32, 3);
  const auto s = support(2, 1);
  EXPECT_EQ(forward_episode(with, q, s).logits->value, forward_episode(without, q, s).logits->value);
}

TEST_F(Episode2Way, EveryTrainableGroupReceivesGradient) {
  for (auto mode : {FusionMode::AC, FusionMode::CC}) {
    const Model<double> m(small(2, 2, mode));
    const auto pred = forward_episode(m, random_tensor(rng, 32, 32, 3), support(2, 3));
    testutil::Tensor<double> coeffs = random_tensor(rng, 1, 1, pred.probs->value.size());
    ad::backward(testutil::project(pred.probs, coeffs));
    for (const auto& [group, params] : m.groups()) {
      if (group == "backbone") continue;
      if (group == "fusion" && query_fusion_is_add(mode)) continue;
      double norm = 0;
      for (const auto& p : params)
        for (double g : p.var->grad.values()) norm += g * g;
      EXPECT_GT(norm, 0.0) << group << " " << to_string(mode);
    }
    for (const auto& p : m.all_parameters()) p.var->zero_grad();
  }
}

TEST(Model, BackboneIsFrozenAndHeadsAreKeyedByWays) {
  Model<double> m(small(2, 2));
  for (const auto& p : m.backbone().parameters()) EXPECT_FALSE(p.var->requires_grad);
  for (const auto& p : m.trainable()) EXPECT_TRUE(p.var->requires_grad);
  EXPECT_TRUE(m.has_decoder(2));
  EXPECT_FALSE(m.has_decoder(5));
  Rng rng(1);
  m.add_decoder(5, rng);
  EXPECT_TRUE(m.groups().count("decoder[5]"));
}

}  // namespace
