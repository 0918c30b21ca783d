#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mfnet/mfnet.hpp"
#include "test_util.hpp"

namespace {

using namespace mfnet;
namespace fs = std::filesystem;

TrainConfig tiny(std::size_t ways = 2) {
  auto c = parse_config("preset = desk\n");
  c.model.ways = ways;
  c.model.backbone.output_channels = 8;
  c.model.relation_groups = 2;
  c.model.scales = 2;
  c.input_size = 48;
  c.epochs = 2;
  c.iters_per_epoch = 2;
  c.batch_size = 1;
  c.optimizer.lr = 0.01;
  c.pml.start_epoch = 1;
  c.episode_pool = 0;
  c.synth.images_per_class = 6;
  c.output_dir = (fs::temp_directory_path() / "mfnet_unit" / "train").string();
  return c;
}

TrainOptions quiet() {
  TrainOptions o;
  o.write_files = false;
  return o;
}

TEST(PolyLr, EndpointsAndMonotone) {
  EXPECT_DOUBLE_EQ(poly_lr(0.01, 0, 100, 0.9), 0.01);
  EXPECT_DOUBLE_EQ(poly_lr(0.01, 100, 100, 0.9), 0.0);
  EXPECT_DOUBLE_EQ(poly_lr(0.01, 50, 100, 1.0), 0.005);
  EXPECT_NEAR(poly_lr(0.01, 50, 100, 0.9), 0.01 * std::pow(0.5, 0.9), 1e-15);
  for (std::size_t i = 1; i < 100; ++i) EXPECT_LT(poly_lr(0.01, i, 100, 0.9), poly_lr(0.01, i - 1, 100, 0.9));
}

TEST(Sgd, MomentumAndWeightDecay) {
  auto w = ad::parameter(Tensor<double>(1, 1, 2, 1.0));
  ParamList<double> params{{"w", w}};
  Sgd<double> sgd(0.9, 0.1);
  w->grad = Tensor<double>(1, 1, 2, 0.5);
  sgd.step(params, 0.1);
  // v = 0.5 + 0.1 * 1 = 0.6; w = 1 - 0.06
  EXPECT_NEAR(w->value[0], 0.94, 1e-15);
  sgd.step(params, 0.1);
  // v = 0.9 * 0.6 + 0.5 + 0.1 * 0.94 = 1.134; w = 0.94 - 0.1134
  EXPECT_NEAR(w->value[1], 0.8266, 1e-12);
}

TEST(Augment, IdentityWarpIsResize) {
  Rng rng(1);
  const auto img = testutil::random_tensor(rng, 20, 20, 3);
  const auto out = warp_image(img, Warp{}, 20);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(out[i], img[i], 1e-12);
  LabelMap m = testutil::random_labels(rng, 20, 20, 3);
  EXPECT_EQ(warp_mask(m, Warp{}, 20), m);
}

TEST(Augment, ImageAndMaskStayAligned) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    LabelMap mask(40, 40, 0);
    const std::size_t y0 = rng.uniform_index(20), x0 = rng.uniform_index(20);
    for (std::size_t y = y0; y < y0 + 15; ++y)
      for (std::size_t x = x0; x < x0 + 15; ++x) mask.at(y, x) = 1;
    Tensor<double> ind(40, 40, 1);
    for (std::size_t i = 0; i < mask.size(); ++i) ind[i] = mask.data[i];
    const auto w = draw_warp(rng, 32);
    const auto wi = warp_image(ind, w, 32);
    const auto wm = warp_mask(mask, w, 32);
    for (std::size_t i = 0; i < wm.size(); ++i) {
      if (wi[i] > 0.999) EXPECT_EQ(wm.data[i], 1);
      if (wi[i] < 0.001) EXPECT_EQ(wm.data[i], 0);
    }
  }
}

TEST(Augment, DrawsStayInRange) {
  Rng rng(3);
  for (int t = 0; t < 500; ++t) {
    const auto w = draw_warp(rng, 100);
    EXPECT_GE(w.scale, 0.9);
    EXPECT_LE(w.scale, 1.1);
    EXPECT_LE(std::abs(w.angle), 10.0 * std::numbers::pi / 180.0);
  }
}

TEST(LogRecord, JsonRoundTrip) {
  LogRecord r{17, 3, 0.0042, 0.7, 0.3, 12, 0.82, true};
  const auto back = log_record_from_json(to_json(r));
  EXPECT_EQ(back.iter, 17u);
  EXPECT_EQ(back.epoch, 3u);
  EXPECT_DOUBLE_EQ(back.lr, 0.0042);
  EXPECT_DOUBLE_EQ(back.l_seg, 0.7);
  EXPECT_DOUBLE_EQ(back.l_pml, 0.3);
  EXPECT_EQ(back.triplets, 12u);
  EXPECT_DOUBLE_EQ(back.loss, 0.82);
  EXPECT_TRUE(back.pml_active);
  EXPECT_THROW(log_record_from_json(nlohmann::json{{"iter", 1}}), DataError);
}

TEST(Report, MovingAverageAndPlot) {
  const auto ma = moving_average({1, 2, 3, 4, 5}, 2);
  EXPECT_EQ(ma, (std::vector<double>{1, 1.5, 2.5, 3.5, 4.5}));
  EXPECT_DOUBLE_EQ(mean_of({1, 2, 3, 4}, 1, 3), 2.5);
  EXPECT_THROW(moving_average({1.0}, 0), ConfigError);
  EXPECT_THROW(mean_of({1.0}, 0, 2), ConfigError);
  std::vector<LogRecord> log;
  for (std::size_t i = 0; i < 30; ++i) log.push_back({i, 0, 0.01, 1.0 / (i + 1), 0.1, 3, 1.0 / (i + 1) + 0.04, true});
  const auto svg = loss_plot_svg(log);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("polyline"), std::string::npos);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}

class Training : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { data_ = new TrainingData(prepare_data(tiny())); }
  static void TearDownTestSuite() { delete data_; }
  static TrainingData* data_;
};
TrainingData* Training::data_ = nullptr;

TEST_F(Training, SameSeedGivesIdenticalParameters) {
  const auto cfg = tiny();
  const auto a = train<float>(cfg, *data_, quiet());
  const auto b = train<float>(cfg, *data_, quiet());
  EXPECT_EQ(parameter_hash(a.model), parameter_hash(b.model));
  ASSERT_EQ(a.log.size(), 4u);
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].loss, b.log[i].loss);
  auto other = cfg;
  other.seed = 2;
  EXPECT_NE(parameter_hash(train<float>(other, *data_, quiet()).model), parameter_hash(a.model));
}

TEST_F(Training, LogFollowsScheduleAndGate) {
  const auto r = train<float>(tiny(), *data_, quiet());
  ASSERT_EQ(r.log.size(), 4u);
  EXPECT_FLOAT_EQ(r.log[0].lr, 0.01f);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(r.log[i].iter, i);
    EXPECT_EQ(r.log[i].epoch, i / 2);
    EXPECT_EQ(r.log[i].pml_active, i >= 2);
    if (!r.log[i].pml_active) EXPECT_DOUBLE_EQ(r.log[i].loss, r.log[i].l_seg);
    else EXPECT_NEAR(r.log[i].loss, r.log[i].l_seg + 0.4 * r.log[i].l_pml, 1e-5);
  }
}

TEST_F(Training, WritesLogCheckpointAndPool) {
  auto cfg = tiny();
  cfg.episode_pool = 3;
  fs::remove_all(cfg.output_dir);
  const auto r = train<float>(cfg, *data_);
  EXPECT_TRUE(fs::exists(r.checkpoint));
  EXPECT_EQ(r.episode_pool.size(), 3u);
  const auto log = read_training_log(r.log_path);
  ASSERT_EQ(log.size(), r.log.size());
  EXPECT_EQ(log.back().loss, r.log.back().loss);
  Model<float> back(cfg.model);
  load_checkpoint(r.checkpoint, back);
  EXPECT_EQ(parameter_hash(back), parameter_hash(r.model));
  std::ifstream pool(fs::path(cfg.output_dir) / "episode_pool.jsonl");
  EXPECT_EQ(read_manifest(pool), r.episode_pool);
}

TEST_F(Training, DivergenceAbortsWithEpisodeId) {
  auto cfg = tiny();
  cfg.optimizer.lr = 1e30;
  cfg.epochs = 5;
  try {
    train<float>(cfg, *data_, quiet());
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(e.episode_id().find("query="), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
  }
}

TEST_F(Training, EvaluationIsPureAndRepeatable) {
  const auto cfg = tiny();
  const auto r = train<float>(cfg, *data_, quiet());
  const auto before = parameter_hash(r.model);
  const auto a = evaluate(cfg, r.model, *data_, 4, 2);
  const auto b = evaluate(cfg, r.model, *data_, 4, 2);
  EXPECT_EQ(parameter_hash(r.model), before);
  EXPECT_EQ(a.miou_star.mean, b.miou_star.mean);
  EXPECT_EQ(a.miou.mean, b.miou.mean);
  EXPECT_LE(a.miou_star.mean, a.miou.mean + 1e-12);
  EXPECT_EQ(a.runs.size(), 2u);
  EXPECT_EQ(a.runs[1].seed, cfg.eval.seed + 1);
  const auto j = to_json(a);
  EXPECT_TRUE(j.contains("miou"));
  EXPECT_TRUE(j.contains("miou_star"));
}

TEST_F(Training, OneWayProtocolsCoincide) {
  const auto cfg = tiny(1);
  const auto data = prepare_data(cfg);
  const Model<float> m(cfg.model);
  const auto rep = evaluate(cfg, m, data, 4, 1);
  EXPECT_DOUBLE_EQ(rep.miou.mean, rep.miou_star.mean);
}

TEST_F(Training, MissingHeadIsACheckpointError) {
  const Model<float> m(tiny(2).model);
  EXPECT_THROW(evaluate(tiny(3), m, *data_, 1, 1), CheckpointError);
}

TEST_F(Training, PredictReturnsLabelsAtQueryResolution) {
  const auto cfg = tiny();
  const Model<float> m(cfg.model);
  Rng rng(4);
  const auto ep = sample_episode(data_->dataset.index(), data_->fold.train_classes, sampler_config(cfg), rng);
  std::vector<std::vector<SupportShot<float>>> support;
  for (std::size_t n = 0; n < 2; ++n) {
    const auto s = data_->dataset.load(ep.support[n][0]);
    support.push_back({{to_tensor<float>(s.image), class_mask(s.mask, ep.classes[n])}});
  }
  const auto q = data_->dataset.load(ep.query);
  const auto labels = predict_labels(m, to_tensor<float>(q.image), support, cfg.input_size);
  EXPECT_EQ(labels.h, q.image.h);
  EXPECT_EQ(labels.w, q.image.w);
  for (int v : labels.data) {
    EXPECT_GE(v, 0);
    EXPECT_LE(v, 2);
  }
  // Self-support: the query doubles as the only shot of its first class.
  std::vector<std::vector<SupportShot<float>>> self{{{to_tensor<float>(q.image), class_mask(q.mask, ep.classes[0])}},
                                                    support[1]};
  EXPECT_EQ(predict_labels(m, to_tensor<float>(q.image), self, cfg.input_size).size(), q.mask.size());
}

}  // namespace
