#pragma once
// Evaluation over sampled episodes (both protocols at once) and
// single-episode prediction from files. Neither touches model parameters.

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mfnet/metrics.hpp"
#include "mfnet/synth.hpp"
#include "mfnet/trainer.hpp"

namespace mfnet {

// Label map at the query's original resolution.
template <typename T>
LabelMap predict_labels(const Model<T>& model, const Tensor<T>& query,
                        const std::vector<std::vector<SupportShot<T>>>& support, std::size_t input_size,
                        FeatureCache<T>* cache = nullptr, const std::string& query_name = {},
                        const std::vector<std::vector<std::string>>& support_names = {}) {
  EpisodeTensors<T> ep;
  ep.query_name = query_name;
  ep.query = resize_image(query, input_size);
  ep.support_names = support_names;
  for (const auto& shots : support) {
    std::vector<SupportShot<T>> resized;
    for (const auto& s : shots) resized.push_back({resize_image(s.image, input_size), resize_mask(s.mask, input_size)});
    ep.support.push_back(std::move(resized));
  }
  // The cache is keyed by name, so unnamed inputs bypass it.
  if (query_name.empty() || support_names.size() != support.size()) cache = nullptr;
  const auto pred = forward_features(model, episode_features(model, ep, cache), input_size, input_size);
  const LabelMap low = kernels::argmax_channels(pred.probs->value);
  if (low.h == query.height() && low.w == query.width()) return low;
  return kernels::nearest_resize(low, query.height(), query.width());
}

struct EpisodeScores {
  ConfusionState miou{Protocol::miou, {}};
  ConfusionState miou_star{Protocol::miou_star, {}};
  std::size_t episodes = 0;
};

// Accumulates both protocols over `episodes`. Ignore pixels (255) of the
// query are removed from both prediction and ground truth.
template <typename T>
EpisodeScores score_episodes(const Model<T>& model, const Dataset& ds, const std::vector<Episode>& episodes,
                             std::size_t input_size, FeatureCache<T>* cache = nullptr) {
  EpisodeScores out;
  for (const auto& ep : episodes) {
    const Sample q = ds.load(ep.query);
    std::vector<std::vector<SupportShot<T>>> support;
    for (std::size_t n = 0; n < ep.classes.size(); ++n) {
      std::vector<SupportShot<T>> shots;
      for (const auto& name : ep.support[n]) {
        const Sample s = ds.load(name);
        shots.push_back({to_tensor<T>(s.image), class_mask(s.mask, ep.classes[n])});
      }
      support.push_back(std::move(shots));
    }
    LabelMap pred = predict_labels(model, to_tensor<T>(q.image), support, input_size, cache, ep.query, ep.support);
    LabelMap gt = remap_labels(q.mask, ep.classes);
    for (std::size_t i = 0; i < gt.size(); ++i)
      if (q.mask.data[i] == 255) pred.data[i] = gt.data[i] = 0;
    accumulate(out.miou, pred, gt, ep.classes);
    accumulate(out.miou_star, pred, gt, ep.classes);
    ++out.episodes;
  }
  return out;
}

struct RunReport {
  std::size_t run = 0;
  std::uint64_t seed = 0;
  double miou = 0.0;
  double miou_star = 0.0;
  std::map<int, double> per_class_miou;
  std::map<int, double> per_class_miou_star;
};

struct EvalReport {
  std::size_t fold_id = 0;
  std::size_t ways = 0;
  std::size_t shots = 0;
  std::size_t episodes = 0;
  std::string split;
  std::vector<RunReport> runs;
  RunAggregate miou;
  RunAggregate miou_star;
};

// Run r draws `episodes` episodes from the chosen split with seed
// eval.seed + r and scores them under both protocols.
template <typename T>
EvalReport evaluate(const TrainConfig& cfg, const Model<T>& model, const TrainingData& data, std::size_t episodes,
                    std::size_t runs, bool use_train_split = false) {
  if (!model.has_decoder(cfg.model.ways))
    throw CheckpointError("evaluate: model has no decoder head for N=" + std::to_string(cfg.model.ways));
  if (runs == 0 || episodes == 0) throw ConfigError("evaluate: episodes and runs must be positive");
  EvalReport rep;
  rep.fold_id = cfg.fold_id;
  rep.ways = cfg.model.ways;
  rep.shots = cfg.shots;
  rep.episodes = episodes;
  rep.split = use_train_split ? "train" : "test";
  const auto& split = use_train_split ? data.fold.train_classes : data.fold.test_classes;
  FeatureCache<T> cache;
  std::vector<double> m, ms;
  for (std::size_t r = 0; r < runs; ++r) {
    Rng rng(cfg.eval.seed + r);
    std::vector<Episode> eps;
    for (std::size_t e = 0; e < episodes; ++e)
      eps.push_back(sample_episode(data.dataset.index(), split, sampler_config(cfg), rng));
    const auto scores = score_episodes(model, data.dataset, eps, cfg.input_size, &cache);
    RunReport rr;
    rr.run = r;
    rr.seed = cfg.eval.seed + r;
    const auto a = score(scores.miou), b = score(scores.miou_star);
    rr.miou = a.mean;
    rr.miou_star = b.mean;
    rr.per_class_miou = a.per_class;
    rr.per_class_miou_star = b.per_class;
    m.push_back(rr.miou);
    ms.push_back(rr.miou_star);
    rep.runs.push_back(std::move(rr));
  }
  rep.miou = aggregate_runs(m);
  rep.miou_star = aggregate_runs(ms);
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r, bool with_miou = true, bool with_star = true) {
  nlohmann::json j{{"fold_id", r.fold_id}, {"ways", r.ways}, {"shots", r.shots},
                   {"episodes", r.episodes}, {"split", r.split}, {"runs", nlohmann::json::array()}};
  auto per_class = [](const std::map<int, double>& m) {
    nlohmann::json o = nlohmann::json::object();
    for (const auto& [k, v] : m) o[std::to_string(k)] = v;
    return o;
  };
  for (const auto& run : r.runs) {
    nlohmann::json rj{{"run", run.run}, {"seed", run.seed}};
    if (with_miou) rj["miou"] = run.miou, rj["per_class_miou"] = per_class(run.per_class_miou);
    if (with_star) rj["miou_star"] = run.miou_star, rj["per_class_miou_star"] = per_class(run.per_class_miou_star);
    j["runs"].push_back(rj);
  }
  if (with_miou) j["miou"] = {{"mean", r.miou.mean}, {"stddev", r.miou.stddev}, {"runs", r.miou.runs}};
  if (with_star)
    j["miou_star"] = {{"mean", r.miou_star.mean}, {"stddev", r.miou_star.stddev}, {"runs", r.miou_star.runs}};
  return j;
}

// ---------------------------------------------------------------------------
// Prediction from files

struct SupportClassFiles {
  std::string name;
  std::vector<std::pair<std::filesystem::path, std::filesystem::path>> shots;  // (image, mask)
};

// <dir>/<class>/images/<shot>.png with <dir>/<class>/masks/<shot>.png;
// classes in lexicographic order become episode labels 1..N.
inline std::vector<SupportClassFiles> read_support_dir(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("support directory '" + dir.string() + "' not found");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  std::vector<SupportClassFiles> out;
  for (const auto& cd : class_dirs) {
    SupportClassFiles c{cd.filename().string(), {}};
    if (!fs::is_directory(cd / "images")) throw DataError("support class '" + c.name + "' lacks images/");
    std::vector<fs::path> images;
    for (const auto& e : fs::directory_iterator(cd / "images"))
      if (e.path().extension() == ".png") images.push_back(e.path());
    std::sort(images.begin(), images.end());
    for (const auto& img : images) {
      const auto mask = cd / "masks" / img.filename();
      if (!fs::exists(mask)) throw DataError("support image '" + img.string() + "' has no mask");
      c.shots.push_back({img, mask});
    }
    if (c.shots.empty()) throw DataError("support class '" + c.name + "' has no shots");
    out.push_back(std::move(c));
  }
  if (out.empty()) throw DataError("support directory '" + dir.string() + "' holds no classes");
  const std::size_t k = out.front().shots.size();
  for (const auto& c : out)
    if (c.shots.size() != k) throw DataError("support classes must all have the same number of shots");
  return out;
}

template <typename T>
std::vector<std::vector<SupportShot<T>>> load_support(const std::vector<SupportClassFiles>& classes) {
  std::vector<std::vector<SupportShot<T>>> out;
  for (const auto& c : classes) {
    std::vector<SupportShot<T>> shots;
    for (const auto& [img, mask] : c.shots) {
      const RgbImage image = read_rgb_png(img);
      LabelMap m = read_label_png(mask);
      if (m.h != image.h || m.w != image.w) throw DataError("support mask size differs from '" + img.string() + "'");
      for (auto& v : m.data) v = v != 0 ? 1 : 0;
      shots.push_back({to_tensor<T>(image), std::move(m)});
    }
    out.push_back(std::move(shots));
  }
  return out;
}

// Label n drawn in its class colour at 50% over the image.
inline RgbImage overlay(const RgbImage& image, const LabelMap& labels) {
  RgbImage out = image;
  for (std::size_t y = 0; y < image.h; ++y)
    for (std::size_t x = 0; x < image.w; ++x) {
      const int l = labels.at(y, x);
      if (l <= 0) continue;
      const auto col = class_colour(l);
      auto* p = out.at(y, x);
      for (int k = 0; k < 3; ++k) p[k] = static_cast<std::uint8_t>((p[k] + col[k]) / 2);
    }
  return out;
}

}  // namespace mfnet
