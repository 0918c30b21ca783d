#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <set>
#include <sstream>

#include "mfnet/dataset.hpp"
#include "mfnet/episodes.hpp"
#include "mfnet/synth.hpp"

namespace {

using namespace mfnet;

std::vector<int> iota_ids(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 1);
  return v;
}

const SyntheticDataset& shared_synth() {
  static const SyntheticDataset sd = [] {
    Rng rng(3);
    return synth_shapes(SynthConfig{8, 20, 96, 96, 0.5}, rng);
  }();
  return sd;
}

TEST(FoldSplit, TwentyClassesFoldZero) {
  const auto f = build_fold_split(iota_ids(20), 0, 4);
  EXPECT_EQ(f.test_classes, (std::vector<int>{1, 2, 3, 4, 5}));
  EXPECT_EQ(f.train_classes.size(), 15u);
  EXPECT_EQ(f.train_classes.front(), 6);
  EXPECT_EQ(f.train_classes.back(), 20);
}

TEST(FoldSplit, EightyClassesFoldThree) {
  const auto f = build_fold_split(iota_ids(80), 3, 4);
  const auto ids = iota_ids(80);
  EXPECT_EQ(f.test_classes, std::vector<int>(ids.begin() + 60, ids.end()));
  EXPECT_EQ(f.train_classes.size(), 60u);
}

TEST(FoldSplit, FourClassesFoldZero) {
  const auto f = build_fold_split(iota_ids(4), 0, 4);
  EXPECT_EQ(f.test_classes, std::vector<int>{1});
  EXPECT_EQ(f.train_classes, (std::vector<int>{2, 3, 4}));
}

TEST(FoldSplit, DisjointAndCoveringForEveryFold) {
  for (int classes : {4, 8, 20, 80}) {
    for (std::size_t fold = 0; fold < 4; ++fold) {
      const auto f = build_fold_split(iota_ids(classes), fold, 4);
      std::set<int> train(f.train_classes.begin(), f.train_classes.end());
      std::set<int> all = train;
      for (int c : f.test_classes) {
        EXPECT_FALSE(train.count(c));
        all.insert(c);
      }
      EXPECT_EQ(all.size(), static_cast<std::size_t>(classes));
    }
  }
}

TEST(FoldSplit, RejectsUnevenAndOutOfRange) {
  EXPECT_THROW(build_fold_split(iota_ids(10), 0, 4), ConfigError);
  EXPECT_THROW(build_fold_split(iota_ids(20), 4, 4), ConfigError);
}

TEST(FoldSplit, FromTestList) {
  const auto f = fold_from_test_list(iota_ids(6), {2, 5}, 1);
  EXPECT_EQ(f.test_classes, (std::vector<int>{2, 5}));
  EXPECT_EQ(f.train_classes, (std::vector<int>{1, 3, 4, 6}));
  EXPECT_THROW(fold_from_test_list(iota_ids(6), {9}, 1), ConfigError);
}

TEST(Synth, DeterministicAndSized) {
  Rng a(3), b(3);
  const auto x = synth_shapes(SynthConfig{8, 20, 96, 96, 0.5}, a);
  const auto y = synth_shapes(SynthConfig{8, 20, 96, 96, 0.5}, b);
  ASSERT_EQ(x.dataset.index().entries.size(), 160u);
  for (std::size_t i = 0; i < 160; ++i) {
    const auto sx = x.dataset.load(i), sy = y.dataset.load(i);
    EXPECT_EQ(sx.image.data, sy.image.data);
    EXPECT_EQ(sx.mask.data, sy.mask.data);
    EXPECT_EQ(sx.image.h, 96u);
  }
}

TEST(Synth, FullCooccurrenceGivesTwoLabels) {
  Rng rng(4);
  const auto sd = synth_shapes(SynthConfig{6, 5, 64, 64, 1.0}, rng);
  for (const auto& e : sd.dataset.index().entries) EXPECT_GE(e.labels.size(), 2u) << e.name;
}

TEST(Synth, MasksRegenerateFromShapes) {
  const auto& sd = shared_synth();
  for (std::size_t i = 0; i < sd.shapes.size(); ++i) {
    const auto s = sd.dataset.load(i);
    EXPECT_EQ(rasterize_mask(sd.shapes[i], s.mask.h, s.mask.w).data, s.mask.data);
  }
}

TEST(Dataset, IndexListsContainTheirClass) {
  const auto& idx = shared_synth().dataset.index();
  for (const auto& [cls, entries] : idx.per_class)
    for (std::size_t e : entries) EXPECT_TRUE(shared_synth().dataset.load(e).mask.contains(cls));
}

TEST(Dataset, FolderRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "mfnet_test_dataset";
  std::filesystem::remove_all(dir);
  Rng rng(5);
  const auto sd = synth_shapes(SynthConfig{4, 3, 32, 32, 0.5}, rng);
  write_synthetic(sd, dir);
  const auto loaded = load_dataset(dir);
  ASSERT_EQ(loaded.index().entries.size(), sd.dataset.index().entries.size());
  EXPECT_EQ(loaded.index().class_ids(), sd.dataset.index().class_ids());
  for (std::size_t i = 0; i < loaded.index().entries.size(); ++i) {
    EXPECT_EQ(loaded.index().entries[i].name, sd.dataset.index().entries[i].name);
    EXPECT_EQ(loaded.load(i).mask.data, sd.dataset.load(i).mask.data);
    EXPECT_EQ(loaded.load(i).image.data, sd.dataset.load(i).image.data);
  }
  std::filesystem::remove_all(dir);
}

TEST(Dataset, MissingFolderIsDataError) {
  EXPECT_THROW(load_dataset("/nonexistent/mfnet"), DataError);
}

class Sampler : public ::testing::Test {
 protected:
  const DatasetIndex& idx = shared_synth().dataset.index();
  const std::vector<int> split = iota_ids(8);
};

TEST_F(Sampler, SameSeedSameEpisodes) {
  Rng a(7), b(7);
  const EpisodeSamplerConfig cfg{2, 3, EpisodeMode::any};
  for (int i = 0; i < 50; ++i) {
    const auto x = sample_episode(idx, split, cfg, a);
    const auto y = sample_episode(idx, split, cfg, b);
    EXPECT_EQ(to_json(x).dump(), to_json(y).dump());
  }
}

TEST_F(Sampler, ModeAllQueryHoldsEveryClass) {
  Rng rng(1);
  const EpisodeSamplerConfig cfg{2, 1, EpisodeMode::all, 200};
  for (int i = 0; i < 50; ++i) {
    const auto ep = sample_episode(idx, split, cfg, rng);
    const auto labels = labels_in(remap_labels(shared_synth().dataset.load(ep.query).mask, ep.classes));
    EXPECT_EQ(labels.back(), 2);
    EXPECT_NE(std::find(labels.begin(), labels.end(), 1), labels.end());
  }
}

TEST_F(Sampler, ModeAnyQueryHoldsSomeClass) {
  Rng rng(2);
  const EpisodeSamplerConfig cfg{3, 1, EpisodeMode::any};
  for (int i = 0; i < 100; ++i) {
    const auto ep = sample_episode(idx, split, cfg, rng);
    EXPECT_GT(labels_in(remap_labels(shared_synth().dataset.load(ep.query).mask, ep.classes)).back(), 0);
  }
}

TEST_F(Sampler, FiveShotSupportIsDistinctFromQuery) {
  Rng rng(3);
  const EpisodeSamplerConfig cfg{2, 5, EpisodeMode::any};
  for (int i = 0; i < 100; ++i) {
    const auto ep = sample_episode(idx, split, cfg, rng);
    std::size_t records = 0;
    for (std::size_t n = 0; n < ep.support.size(); ++n) {
      std::set<std::string> distinct(ep.support[n].begin(), ep.support[n].end());
      EXPECT_EQ(distinct.size(), 5u);
      for (const auto& s : ep.support[n]) {
        EXPECT_NE(s, ep.query);
        EXPECT_TRUE(shared_synth().dataset.load(s).mask.contains(ep.classes[n]));
        ++records;
      }
    }
    EXPECT_EQ(records, 10u);
  }
}

TEST_F(Sampler, ClassesComeFromSplit) {
  Rng rng(4);
  const std::vector<int> sub{2, 4, 6};
  for (int i = 0; i < 100; ++i) {
    const auto ep = sample_episode(idx, sub, EpisodeSamplerConfig{2, 1}, rng);
    for (int c : ep.classes) EXPECT_NE(std::find(sub.begin(), sub.end(), c), sub.end());
    EXPECT_NE(ep.classes[0], ep.classes[1]);
  }
}

TEST_F(Sampler, TooFewClassesIsEpisodeError) {
  Rng rng(5);
  EXPECT_THROW(sample_episode(idx, {1, 2}, EpisodeSamplerConfig{3, 1}, rng), EpisodeError);
}

TEST_F(Sampler, ManifestRoundTrip) {
  Rng rng(6);
  std::vector<Episode> eps;
  for (int i = 0; i < 10; ++i) eps.push_back(sample_episode(idx, split, EpisodeSamplerConfig{2, 2}, rng));
  std::stringstream ss;
  write_manifest(ss, eps);
  const auto back = read_manifest(ss);
  ASSERT_EQ(back.size(), eps.size());
  for (std::size_t i = 0; i < eps.size(); ++i) EXPECT_EQ(to_json(back[i]), to_json(eps[i]));
}

TEST(RemapLabels, SingleClass) {
  LabelMap raw(1, 2);
  raw.data = {12, 0};
  EXPECT_EQ(remap_labels(raw, {12}).data, (std::vector<int>{1, 0}));
}

TEST(RemapLabels, OffEpisodeClassBecomesBackground) {
  LabelMap raw(1, 3);
  raw.data = {7, 5, 0};
  EXPECT_EQ(remap_labels(raw, {5}).data, (std::vector<int>{0, 1, 0}));
}

TEST(RemapLabels, OrderFollowsEpisodeClasses) {
  LabelMap raw(1, 2);
  raw.data = {9, 5};
  EXPECT_EQ(remap_labels(raw, {5, 9}).data, (std::vector<int>{2, 1}));
}

TEST(RemapLabels, IdempotentOnItsOutput) {
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    LabelMap raw(6, 6);
    for (auto& v : raw.data) v = static_cast<int>(rng.uniform_index(6));
    const std::vector<int> classes{3, 1};
    const auto once = remap_labels(raw, classes);
    EXPECT_EQ(remap_labels(once, {1, 2}).data, once.data);
    // Every label present in the output comes from a class present in the input.
    for (int l : labels_in(once))
      if (l > 0) EXPECT_TRUE(raw.contains(classes[static_cast<std::size_t>(l - 1)]));
  }
}

}  // namespace
