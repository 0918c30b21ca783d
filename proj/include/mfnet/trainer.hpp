#pragma once
// Episodic training: poly learning-rate decay, SGD with momentum, optional
// augmentation, focal segmentation loss plus the gated metric-learning term.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "mfnet/augment.hpp"
#include "mfnet/checkpoint.hpp"
#include "mfnet/config.hpp"
#include "mfnet/dataset.hpp"
#include "mfnet/episodes.hpp"
#include "mfnet/losses.hpp"
#include "mfnet/network.hpp"
#include "mfnet/synth.hpp"

namespace mfnet {

// lr0 * (1 - iter / max_iter)^power, zero from max_iter on.
inline double poly_lr(double lr0, std::size_t iter, std::size_t max_iter, double power) {
  if (max_iter == 0 || iter >= max_iter) return 0.0;
  return lr0 * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

// v <- momentum * v + g + weight_decay * w;  w <- w - lr * v
template <typename T>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const ParamList<T>& params, double lr) {
    for (const auto& p : params) {
      auto& node = *p.var;
      if (node.grad.shape() != node.value.shape()) continue;
      auto& v = velocity_[&node];
      if (v.shape() != node.value.shape()) v = Tensor<T>(node.value.shape());
      for (std::size_t i = 0; i < v.size(); ++i) {
        const T g = node.grad[i] + static_cast<T>(weight_decay_) * node.value[i];
        v[i] = static_cast<T>(momentum_) * v[i] + g;
        node.value[i] -= static_cast<T>(lr) * v[i];
      }
    }
  }

 private:
  double momentum_;
  double weight_decay_;
  std::unordered_map<const ad::Node<T>*, Tensor<T>> velocity_;
};

// Dataset plus the class split used for training and evaluation.
struct TrainingData {
  Dataset dataset;
  FoldSpec fold;
};

inline TrainingData prepare_data(const TrainConfig& cfg) {
  TrainingData d;
  if (cfg.dataset == "synthetic") {
    Rng rng(cfg.synth_seed);
    d.dataset = synth_shapes(cfg.synth, rng).dataset;
  } else {
    d.dataset = load_dataset(cfg.dataset_path);
  }
  const auto ids = d.dataset.index().class_ids();
  std::optional<std::vector<int>> listed;
  if (cfg.dataset == "folder") listed = read_fold_file(cfg.dataset_path, cfg.fold_id);
  d.fold = listed ? fold_from_test_list(ids, *listed, cfg.fold_id, d.dataset.index().name)
                  : build_fold_split(ids, cfg.fold_id, cfg.num_folds, d.dataset.index().name);
  return d;
}

inline EpisodeSamplerConfig sampler_config(const TrainConfig& cfg) {
  return {cfg.model.ways, cfg.shots, cfg.episode_mode, 50};
}

// Network-ready tensors of one episode at input resolution.
template <typename T>
struct EpisodeTensors {
  std::string query_name;
  Tensor<T> query;
  LabelMap query_gt;  // episode-local labels
  std::vector<std::vector<std::string>> support_names;
  std::vector<std::vector<SupportShot<T>>> support;
};

// Resizes (or, with `augment`, warps) every image of the episode to
// input_size x input_size. Support masks become binary class masks.
template <typename T>
EpisodeTensors<T> load_episode(const Dataset& ds, const Episode& ep, std::size_t input_size, Rng* augment) {
  auto prepare = [&](const Sample& s, Tensor<T>& image, LabelMap& mask) {
    const Tensor<T> t = to_tensor<T>(s.image);
    if (augment) {
      const Warp w = draw_warp(*augment, input_size);
      image = warp_image(t, w, input_size);
      mask = warp_mask(s.mask, w, input_size);
    } else {
      image = resize_image(t, input_size);
      mask = resize_mask(s.mask, input_size);
    }
  };
  EpisodeTensors<T> out;
  out.query_name = ep.query;
  LabelMap raw;
  prepare(ds.load(ep.query), out.query, raw);
  out.query_gt = remap_labels(raw, ep.classes);
  out.support_names = ep.support;
  for (std::size_t n = 0; n < ep.classes.size(); ++n) {
    std::vector<SupportShot<T>> shots;
    for (const auto& name : ep.support[n]) {
      SupportShot<T> shot;
      LabelMap m;
      prepare(ds.load(name), shot.image, m);
      shot.mask = class_mask(m, ep.classes[n]);
      shots.push_back(std::move(shot));
    }
    out.support.push_back(std::move(shots));
  }
  return out;
}

// Backbone outputs keyed by sample name. Only valid when images are not
// augmented (the backbone is frozen, so features never change).
template <typename T>
class FeatureCache {
 public:
  const FeatureMap<T>& get(const Backbone<T>& backbone, const std::string& name, const Tensor<T>& image) {
    auto it = maps_.find(name);
    if (it == maps_.end()) it = maps_.emplace(name, backbone.extract(image)).first;
    return it->second;
  }
  std::size_t size() const { return maps_.size(); }

 private:
  std::map<std::string, FeatureMap<T>> maps_;
};

template <typename T>
EpisodeFeatures<T> episode_features(const Model<T>& model, const EpisodeTensors<T>& ep, FeatureCache<T>* cache) {
  if (!cache) return extract_episode_features(model, ep.query, ep.support);
  EpisodeFeatures<T> f;
  f.query = cache->get(model.backbone(), ep.query_name, ep.query);
  for (std::size_t n = 0; n < ep.support.size(); ++n) {
    std::vector<Prototype<T>> shots;
    for (std::size_t k = 0; k < ep.support[n].size(); ++k) {
      const auto& s = ep.support[n][k];
      auto p = masked_global_pool(cache->get(model.backbone(), ep.support_names[n][k], s.image), s.mask);
      p.class_index = n + 1;
      f.fallbacks += p.fallback ? 1 : 0;
      shots.push_back(std::move(p));
    }
    f.shots.push_back(std::move(shots));
  }
  return f;
}

struct LogRecord {
  std::size_t iter = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double l_seg = 0.0;
  double l_pml = 0.0;  // mean over the batch; computed before the gate opens too
  std::size_t triplets = 0;
  double loss = 0.0;
  bool pml_active = false;
};

inline nlohmann::json to_json(const LogRecord& r) {
  return {{"iter", r.iter},         {"epoch", r.epoch},       {"lr", r.lr},
          {"l_seg", r.l_seg},       {"l_pml", r.l_pml},       {"triplets", r.triplets},
          {"loss", r.loss},         {"pml_active", r.pml_active}};
}

inline LogRecord log_record_from_json(const nlohmann::json& j) {
  LogRecord r;
  try {
    r.iter = j.at("iter").get<std::size_t>();
    r.epoch = j.value("epoch", std::size_t{0});
    r.lr = j.at("lr").get<double>();
    r.l_seg = j.at("l_seg").get<double>();
    r.l_pml = j.at("l_pml").get<double>();
    r.triplets = j.at("triplets").get<std::size_t>();
    r.loss = j.at("loss").get<double>();
    r.pml_active = j.value("pml_active", false);
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("training log: ") + ex.what());
  }
  return r;
}

// Per-episode losses for one forward pass.
template <typename T>
struct EpisodeLoss {
  ad::Var<T> total;
  double seg = 0.0;
  double pml = 0.0;
  std::size_t triplets = 0;
};

// Triplet pools live at feature resolution: gt by area-majority vote,
// predictions by argmax of the low-resolution logits.
template <typename T>
EpisodeLoss<T> episode_loss(const TrainConfig& cfg, const SegPrediction<T>& pred, const LabelMap& gt,
                            std::size_t epoch, Rng& triplet_rng) {
  EpisodeLoss<T> out;
  auto seg = focal_seg_loss(pred.probs, gt, cfg.focal);
  out.seg = static_cast<double>(seg->value[0]);
  ad::Var<T> pml;
  if (cfg.pml.enabled) {
    const auto& logits = pred.logits->value;
    const auto pools = build_pools(kernels::argmax_channels(logits),
                                   kernels::majority_resize(gt, logits.height(), logits.width()), cfg.model.ways);
    const auto embedding = cfg.pml.normalize ? ad::normalize_pixels(pred.embedding) : pred.embedding;
    const auto triplets = select_triplets<T>(
        pools, {cfg.pml.triplets, cfg.pml.strategy, cfg.pml.tau}, triplet_rng, &embedding->value);
    pml = triplet_loss(embedding, triplets, cfg.pml.alpha);
    out.pml = static_cast<double>(pml->value[0]);
    out.triplets = triplets.size();
  }
  out.total = total_loss(seg, pml, cfg.pml.lambda, epoch, cfg.pml.enabled ? cfg.pml.start_epoch : SIZE_MAX);
  return out;
}

inline std::size_t iterations_per_epoch(const TrainConfig& cfg, const TrainingData& data) {
  if (cfg.iters_per_epoch > 0) return cfg.iters_per_epoch;
  std::set<std::size_t> images;
  for (int c : data.fold.train_classes) {
    auto it = data.dataset.index().per_class.find(c);
    if (it != data.dataset.index().per_class.end()) images.insert(it->second.begin(), it->second.end());
  }
  return std::max<std::size_t>(1, (images.size() + cfg.batch_size - 1) / cfg.batch_size);
}

// Builds the model and loads backbone weights from `backbone.weights` when set.
template <typename T>
Model<T> build_model(const TrainConfig& cfg) {
  Model<T> model(cfg.model);
  if (!cfg.model.backbone.weights.empty())
    load_parameters(read_checkpoint(cfg.model.backbone.weights), model, {"backbone"});
  return model;
}

template <typename T>
struct TrainResult {
  Model<T> model;
  std::vector<LogRecord> log;
  std::vector<Episode> episode_pool;  // empty unless cfg.episode_pool > 0
  std::filesystem::path checkpoint;   // empty when files are not written
  std::filesystem::path log_path;
};

struct TrainOptions {
  bool write_files = true;
  std::ostream* progress = nullptr;
  std::size_t progress_every = 50;
};

template <typename T>
TrainResult<T> train(const TrainConfig& cfg, const TrainingData& data, const TrainOptions& opts = {}) {
  validate(cfg);
  namespace fs = std::filesystem;
  TrainResult<T> result{build_model<T>(cfg), {}, {}, {}, {}};
  Model<T>& model = result.model;
  const auto params = model.trainable();

  Rng master(cfg.seed);
  Rng episode_rng = master.fork();
  Rng augment_rng = master.fork();
  Rng triplet_rng = master.fork();

  const auto sampler = sampler_config(cfg);
  for (std::size_t i = 0; i < cfg.episode_pool; ++i)
    result.episode_pool.push_back(sample_episode(data.dataset.index(), data.fold.train_classes, sampler, episode_rng));

  const std::size_t ipe = iterations_per_epoch(cfg, data);
  const std::size_t max_iter = cfg.epochs * ipe;
  FeatureCache<T> cache;
  FeatureCache<T>* cache_ptr = cfg.augment ? nullptr : &cache;

  std::ofstream log_file;
  if (opts.write_files) {
    fs::create_directories(cfg.output_dir);
    result.log_path = fs::path(cfg.output_dir) / "train_log.jsonl";
    log_file.open(result.log_path);
    if (!log_file) throw DataError("cannot write '" + result.log_path.string() + "'");
    std::ofstream(fs::path(cfg.output_dir) / "config.txt") << to_text(cfg);
  }

  Sgd<T> sgd(cfg.optimizer.momentum, cfg.optimizer.weight_decay);
  const T inv_batch = T{1} / static_cast<T>(cfg.batch_size);
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    const std::size_t epoch = iter / ipe;
    LogRecord rec;
    rec.iter = iter;
    rec.epoch = epoch;
    rec.lr = poly_lr(cfg.optimizer.lr, iter, max_iter, cfg.optimizer.poly_power);
    rec.pml_active = cfg.pml.enabled && epoch >= cfg.pml.start_epoch;
    zero_grads(params);
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      Episode ep;
      std::string id;
      if (result.episode_pool.empty()) {
        ep = sample_episode(data.dataset.index(), data.fold.train_classes, sampler, episode_rng);
        id = "iter" + std::to_string(iter) + "/b" + std::to_string(b) + " query=" + ep.query;
      } else {
        const std::size_t slot = (iter * cfg.batch_size + b) % result.episode_pool.size();
        ep = result.episode_pool[slot];
        id = "pool" + std::to_string(slot) + " query=" + ep.query;
      }
      const auto tensors = load_episode<T>(data.dataset, ep, cfg.input_size, cfg.augment ? &augment_rng : nullptr);
      const auto pred = forward_features(model, episode_features(model, tensors, cache_ptr), cfg.input_size,
                                         cfg.input_size);
      const auto loss = episode_loss(cfg, pred, tensors.query_gt, epoch, triplet_rng);
      const double value = static_cast<double>(loss.total->value[0]);
      if (!std::isfinite(value))
        throw NumericalError("non-finite loss at iteration " + std::to_string(iter) + " (episode " + id + ")", id);
      ad::backward(loss.total, inv_batch);
      rec.l_seg += loss.seg / static_cast<double>(cfg.batch_size);
      rec.l_pml += loss.pml / static_cast<double>(cfg.batch_size);
      rec.triplets += loss.triplets;
      rec.loss += value / static_cast<double>(cfg.batch_size);
    }
    sgd.step(params, rec.lr);
    result.log.push_back(rec);
    if (log_file) log_file << to_json(rec).dump() << '\n';
    if (opts.progress && (iter % opts.progress_every == 0 || iter + 1 == max_iter))
      *opts.progress << "iter " << iter << "/" << max_iter << " lr " << rec.lr << " loss " << rec.loss
                     << " l_seg " << rec.l_seg << " l_pml " << rec.l_pml << '\n';
    const bool epoch_end = (iter + 1) % ipe == 0;
    if (opts.write_files && epoch_end && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
        iter + 1 != max_iter)
      save_checkpoint(fs::path(cfg.output_dir) / ("checkpoint_epoch" + std::to_string(epoch + 1) + ".ckpt"), model,
                      cfg);
  }
  if (opts.write_files) {
    result.checkpoint = fs::path(cfg.output_dir) / "final.ckpt";
    save_checkpoint(result.checkpoint, model, cfg);
    std::ofstream pool_file(fs::path(cfg.output_dir) / "episode_pool.jsonl");
    write_manifest(pool_file, result.episode_pool);
  }
  return result;
}

template <typename T>
TrainResult<T> train(const TrainConfig& cfg, const TrainOptions& opts = {}) {
  return train<T>(cfg, prepare_data(cfg), opts);
}

}  // namespace mfnet
