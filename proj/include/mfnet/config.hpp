#pragma once
// Training configuration and its flat "key = value" text form.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "mfnet/core/error.hpp"
#include "mfnet/episodes.hpp"
#include "mfnet/losses.hpp"
#include "mfnet/network.hpp"
#include "mfnet/synth.hpp"

namespace mfnet {

struct PmlConfig {
  bool enabled = true;
  TripletStrategy strategy = TripletStrategy::spat;
  std::size_t triplets = 20;  // N_t
  double alpha = 1.0;
  double lambda = 0.4;
  std::size_t start_epoch = 5;
  double tau = 0.1;  // kernel bandwidth as a fraction of the feature-map diagonal
  bool normalize = false;  // unit-length embedding pixels before the triplet loss
  friend bool operator==(const PmlConfig&, const PmlConfig&) = default;
};

struct OptimizerConfig {
  double lr = 0.0025;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double poly_power = 0.9;
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

struct EvalConfig {
  std::size_t episodes = 1000;
  std::size_t runs = 5;
  std::uint64_t seed = 2024;
  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct TrainConfig {
  std::string preset = "pascal";
  std::string dataset = "folder";  // folder | synthetic
  std::string dataset_path;
  SynthConfig synth{};
  std::uint64_t synth_seed = 3;
  std::size_t fold_id = 0;
  std::size_t num_folds = 4;
  std::size_t shots = 1;  // K
  EpisodeMode episode_mode = EpisodeMode::any;
  ModelConfig model{};
  PmlConfig pml{};
  FocalConfig focal{};
  OptimizerConfig optimizer{};
  std::size_t epochs = 200;
  std::size_t iters_per_epoch = 0;  // 0: training images / batch_size
  std::size_t batch_size = 4;
  std::uint64_t seed = 1;
  std::size_t input_size = 473;
  bool augment = true;
  std::size_t episode_pool = 0;  // > 0: train on a fixed set of episodes
  std::size_t checkpoint_every = 0;  // epochs; 0: final checkpoint only
  std::string output_dir = "run";
  EvalConfig eval{};

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Defaults reproduce the reported PASCAL-5i setup.
inline TrainConfig pascal_preset() {
  TrainConfig c;
  c.preset = "pascal";
  c.model.ways = 2;
  c.model.scales = 4;
  c.model.relation_groups = 4;
  c.model.backbone.kind = BackboneKind::pretrained_midlevel;
  c.model.backbone.output_channels = 256;
  c.epochs = 200;
  c.optimizer.lr = 0.0025;
  c.batch_size = 4;
  c.pml.start_epoch = 5;
  c.eval.episodes = 1000;
  return c;
}

inline TrainConfig coco_preset() {
  TrainConfig c = pascal_preset();
  c.preset = "coco";
  c.epochs = 50;
  c.optimizer.lr = 0.005;
  c.batch_size = 8;
  c.pml.start_epoch = 1;
  c.eval.episodes = 10000;
  return c;
}

// CPU-sized pipeline on synthetic shapes with the tiny random backbone.
inline TrainConfig desk_preset() {
  TrainConfig c = pascal_preset();
  c.preset = "desk";
  c.dataset = "synthetic";
  c.synth = SynthConfig{8, 20, 96, 96, 0.5};
  c.model.backbone.kind = BackboneKind::tiny_random;
  c.model.backbone.output_channels = 32;
  c.model.backbone.stride = 8;
  c.input_size = 384;
  c.epochs = 10;
  c.iters_per_epoch = 30;
  c.batch_size = 8;
  c.optimizer.lr = 0.05;
  c.pml.start_epoch = 8;
  c.pml.normalize = true;
  c.augment = false;
  c.episode_pool = 8;
  c.eval.episodes = 100;
  c.eval.runs = 5;
  return c;
}

inline TrainConfig preset_config(const std::string& name) {
  if (name == "pascal") return pascal_preset();
  if (name == "coco") return coco_preset();
  if (name == "desk") return desk_preset();
  throw ConfigError("unknown preset '" + name + "'");
}

namespace detail {

template <typename V>
std::string format_value(const V& v) {
  if constexpr (std::is_same_v<V, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_integral_v<V>) {
    return std::to_string(v);
  } else if constexpr (std::is_floating_point_v<V>) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(v));
    return buf;
  } else if constexpr (std::is_same_v<V, std::string>) {
    return v;
  } else {
    return to_string(v);
  }
}

template <typename V>
void parse_value(const std::string& key, const std::string& text, V& out) {
  auto fail = [&] { throw ConfigError("config: bad value '" + text + "' for key '" + key + "'"); };
  if constexpr (std::is_same_v<V, bool>) {
    if (text == "true" || text == "1") out = true;
    else if (text == "false" || text == "0") out = false;
    else fail();
  } else if constexpr (std::is_integral_v<V>) {
    V v{};
    auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || p != text.data() + text.size()) fail();
    out = v;
  } else if constexpr (std::is_floating_point_v<V>) {
    try {
      std::size_t pos = 0;
      out = std::stod(text, &pos);
      if (pos != text.size() || !std::isfinite(out)) fail();
    } catch (const std::logic_error&) {
      fail();
    }
  } else if constexpr (std::is_same_v<V, std::string>) {
    out = text;
  } else if constexpr (std::is_same_v<V, EpisodeMode>) {
    out = parse_episode_mode(text);
  } else if constexpr (std::is_same_v<V, FusionMode>) {
    out = parse_fusion_mode(text);
  } else if constexpr (std::is_same_v<V, TripletStrategy>) {
    out = parse_triplet_strategy(text);
  } else if constexpr (std::is_same_v<V, BackboneKind>) {
    out = parse_backbone_kind(text);
  }
}

}  // namespace detail

// Calls f(key, field) for every configurable field, in file order.
template <typename Cfg, typename F>
void visit_fields(Cfg& c, F&& f) {
  f("preset", c.preset);
  f("dataset", c.dataset);
  f("dataset_path", c.dataset_path);
  f("synth.classes", c.synth.num_classes);
  f("synth.images_per_class", c.synth.images_per_class);
  f("synth.height", c.synth.height);
  f("synth.width", c.synth.width);
  f("synth.cooccurrence", c.synth.cooccurrence);
  f("synth.seed", c.synth_seed);
  f("fold_id", c.fold_id);
  f("num_folds", c.num_folds);
  f("N", c.model.ways);
  f("K", c.shots);
  f("Z", c.model.scales);
  f("N_r", c.model.relation_groups);
  f("episode_mode", c.episode_mode);
  f("fusion_mode", c.model.fusion);
  f("use_AS", c.model.use_relation);
  f("use_AM", c.model.use_scale_attention);
  f("init_seed", c.model.init_seed);
  f("pml.enabled", c.pml.enabled);
  f("pml.strategy", c.pml.strategy);
  f("pml.N_t", c.pml.triplets);
  f("pml.alpha", c.pml.alpha);
  f("pml.lambda", c.pml.lambda);
  f("pml.start_epoch", c.pml.start_epoch);
  f("pml.tau", c.pml.tau);
  f("pml.normalize", c.pml.normalize);
  f("focal.gamma", c.focal.gamma);
  f("focal.class_weighting", c.focal.class_weighting);
  f("focal.include_background", c.focal.include_background);
  f("optimizer.lr", c.optimizer.lr);
  f("optimizer.momentum", c.optimizer.momentum);
  f("optimizer.weight_decay", c.optimizer.weight_decay);
  f("optimizer.poly_power", c.optimizer.poly_power);
  f("epochs", c.epochs);
  f("iters_per_epoch", c.iters_per_epoch);
  f("batch_size", c.batch_size);
  f("seed", c.seed);
  f("input_size", c.input_size);
  f("augment", c.augment);
  f("episode_pool", c.episode_pool);
  f("checkpoint_every", c.checkpoint_every);
  f("output_dir", c.output_dir);
  f("backbone.kind", c.model.backbone.kind);
  f("backbone.frozen", c.model.backbone.frozen);
  f("backbone.channels", c.model.backbone.output_channels);
  f("backbone.stride", c.model.backbone.stride);
  f("backbone.bias", c.model.backbone.bias);
  f("backbone.seed", c.model.backbone.init_seed);
  f("backbone.weights", c.model.backbone.weights);
  f("eval.episodes", c.eval.episodes);
  f("eval.runs", c.eval.runs);
  f("eval.seed", c.eval.seed);
}

inline void validate(const TrainConfig& c) {
  auto positive = [](std::size_t v, const char* k) {
    if (v == 0) throw ConfigError(std::string("config: ") + k + " must be positive");
  };
  positive(c.model.ways, "N");
  positive(c.shots, "K");
  positive(c.model.scales, "Z");
  positive(c.model.relation_groups, "N_r");
  positive(c.epochs, "epochs");
  positive(c.batch_size, "batch_size");
  positive(c.input_size, "input_size");
  positive(c.num_folds, "num_folds");
  if (c.model.channels() % c.model.relation_groups != 0) throw ConfigError("config: N_r must divide backbone.channels");
  if (c.fold_id >= c.num_folds) throw ConfigError("config: fold_id out of range");
  if (c.dataset != "folder" && c.dataset != "synthetic") throw ConfigError("config: dataset must be folder or synthetic");
  if (c.dataset == "folder" && c.dataset_path.empty()) throw ConfigError("config: dataset_path required for folder datasets");
  if (c.optimizer.lr <= 0 || c.optimizer.momentum < 0 || c.optimizer.weight_decay < 0 || c.optimizer.poly_power <= 0)
    throw ConfigError("config: optimizer values out of range");
  if (c.pml.lambda < 0 || c.pml.alpha < 0 || c.pml.tau <= 0) throw ConfigError("config: pml values out of range");
  if (c.focal.gamma < 0) throw ConfigError("config: focal.gamma must be >= 0");
  if (!c.model.backbone.frozen) throw ConfigError("config: backbone.frozen must be true");
  if (c.input_size < c.model.backbone.stride) throw ConfigError("config: input_size below backbone minimum");
}

inline std::string to_text(const TrainConfig& c) {
  std::ostringstream os;
  visit_fields(c, [&](const char* key, const auto& v) { os << key << " = " << detail::format_value(v) << '\n'; });
  return os.str();
}

inline void apply_override(TrainConfig& c, const std::string& key, const std::string& value) {
  bool found = false;
  visit_fields(c, [&](const char* k, auto& v) {
    if (key == k) {
      detail::parse_value(key, value, v);
      found = true;
    }
  });
  if (!found) throw ConfigError("config: unknown key '" + key + "'");
}

inline std::pair<std::string, std::string> split_assignment(const std::string& line) {
  const auto eq = line.find('=');
  if (eq == std::string::npos) throw ConfigError("config: expected 'key = value', got '" + line + "'");
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  return {trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
}

// A `preset` line selects the base configuration; remaining keys override it
// in order. Unknown keys are rejected.
inline TrainConfig parse_config(const std::string& text,
                                const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    kv.push_back(split_assignment(line));
  }
  kv.insert(kv.end(), overrides.begin(), overrides.end());
  std::string preset = "pascal";
  for (const auto& [k, v] : kv)
    if (k == "preset") preset = v;
  TrainConfig c = preset_config(preset);
  for (const auto& [k, v] : kv) apply_override(c, k, v);
  validate(c);
  return c;
}

inline TrainConfig load_config(const std::string& path,
                               const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides);
}

}  // namespace mfnet
