#pragma once
// Fold splits, N-way K-shot episode sampling, label remapping and episode
// manifests (one JSON record per line, replayable exactly).

#include <algorithm>
#include <istream>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mfnet/core/error.hpp"
#include "mfnet/core/rng.hpp"
#include "mfnet/dataset.hpp"

namespace mfnet {

struct FoldSpec {
  std::string dataset_name;
  std::size_t fold_id = 0;
  std::vector<int> train_classes;
  std::vector<int> test_classes;
  friend bool operator==(const FoldSpec&, const FoldSpec&) = default;
};

// Test classes are the fold_id-th contiguous block of the ordered class list.
inline FoldSpec build_fold_split(const std::vector<int>& class_ids, std::size_t fold_id, std::size_t num_folds,
                                 std::string dataset_name = {}) {
  if (num_folds == 0 || class_ids.size() % num_folds != 0)
    throw ConfigError(std::to_string(class_ids.size()) + " classes cannot be split into " +
                      std::to_string(num_folds) + " equal folds");
  if (fold_id >= num_folds)
    throw ConfigError("fold " + std::to_string(fold_id) + " out of range for " + std::to_string(num_folds) + " folds");
  const std::size_t block = class_ids.size() / num_folds;
  FoldSpec f{std::move(dataset_name), fold_id, {}, {}};
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    const bool test = i >= fold_id * block && i < (fold_id + 1) * block;
    (test ? f.test_classes : f.train_classes).push_back(class_ids[i]);
  }
  return f;
}

// Explicit test list (from a fold file); everything else trains.
inline FoldSpec fold_from_test_list(const std::vector<int>& class_ids, const std::vector<int>& test,
                                    std::size_t fold_id, std::string dataset_name = {}) {
  const std::set<int> t(test.begin(), test.end());
  FoldSpec f{std::move(dataset_name), fold_id, {}, {}};
  for (int c : class_ids) (t.count(c) ? f.test_classes : f.train_classes).push_back(c);
  if (f.test_classes.size() != t.size()) throw ConfigError("fold file lists classes missing from classes.txt");
  return f;
}

enum class EpisodeMode { any, all };

inline std::string to_string(EpisodeMode m) { return m == EpisodeMode::any ? "any" : "all"; }

inline EpisodeMode parse_episode_mode(const std::string& s) {
  if (s == "any") return EpisodeMode::any;
  if (s == "all") return EpisodeMode::all;
  throw ConfigError("unknown episode mode '" + s + "'");
}

struct Episode {
  std::vector<int> classes;                    // dataset ids; label n is classes[n-1]
  std::vector<std::vector<std::string>> support;  // [N][K] entry names
  std::string query;
  EpisodeMode mode = EpisodeMode::any;
  friend bool operator==(const Episode&, const Episode&) = default;
};

struct EpisodeSamplerConfig {
  std::size_t ways = 2;
  std::size_t shots = 1;
  EpisodeMode mode = EpisodeMode::any;
  std::size_t max_retries = 50;
};

// Draws N distinct classes from `split`, a query satisfying the mode
// constraint and K support images per class, none equal to the query.
inline Episode sample_episode(const DatasetIndex& index, const std::vector<int>& split,
                              const EpisodeSamplerConfig& cfg, Rng& rng) {
  if (cfg.ways == 0 || cfg.shots == 0) throw ConfigError("sample_episode: N and K must be >= 1");
  std::vector<int> eligible;
  for (int c : split) {
    auto it = index.per_class.find(c);
    if (it != index.per_class.end() && !it->second.empty()) eligible.push_back(c);
  }
  if (eligible.size() < cfg.ways)
    throw EpisodeError("sample_episode: split has " + std::to_string(eligible.size()) +
                       " populated classes, need " + std::to_string(cfg.ways));
  for (std::size_t attempt = 0; attempt < cfg.max_retries; ++attempt) {
    Episode ep;
    ep.mode = cfg.mode;
    for (std::size_t i : rng.sample_without_replacement(eligible.size(), cfg.ways)) ep.classes.push_back(eligible[i]);

    std::vector<std::size_t> candidates;
    if (cfg.mode == EpisodeMode::any) {
      std::set<std::size_t> u;
      for (int c : ep.classes) u.insert(index.per_class.at(c).begin(), index.per_class.at(c).end());
      candidates.assign(u.begin(), u.end());
    } else {
      candidates = index.per_class.at(ep.classes[0]);
      for (std::size_t n = 1; n < ep.classes.size(); ++n) {
        const auto& other = index.per_class.at(ep.classes[n]);
        std::vector<std::size_t> keep;
        std::set_intersection(candidates.begin(), candidates.end(), other.begin(), other.end(),
                              std::back_inserter(keep));
        candidates = std::move(keep);
      }
    }
    if (candidates.empty()) continue;
    const std::size_t query = candidates[rng.uniform_index(candidates.size())];
    ep.query = index.entries[query].name;

    bool ok = true;
    for (int c : ep.classes) {
      std::vector<std::size_t> pool;
      for (std::size_t e : index.per_class.at(c))
        if (e != query) pool.push_back(e);
      if (pool.size() < cfg.shots) {
        ok = false;
        break;
      }
      std::vector<std::string> shots;
      for (std::size_t i : rng.sample_without_replacement(pool.size(), cfg.shots))
        shots.push_back(index.entries[pool[i]].name);
      ep.support.push_back(std::move(shots));
    }
    if (ok) return ep;
  }
  throw EpisodeError("sample_episode: no valid episode after " + std::to_string(cfg.max_retries) + " attempts (mode " +
                     to_string(cfg.mode) + ")");
}

// Episode class n -> n; every other label (background, off-episode classes,
// ignore) -> 0.
inline LabelMap remap_labels(const LabelMap& raw, const std::vector<int>& episode_classes) {
  LabelMap out(raw.h, raw.w, 0);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    auto it = std::find(episode_classes.begin(), episode_classes.end(), raw.data[i]);
    if (it != episode_classes.end() && raw.data[i] != 0)
      out.data[i] = static_cast<int>(it - episode_classes.begin()) + 1;
  }
  return out;
}

// Binary support mask for one class.
inline LabelMap class_mask(const LabelMap& raw, int class_id) {
  LabelMap out(raw.h, raw.w, 0);
  for (std::size_t i = 0; i < raw.size(); ++i) out.data[i] = raw.data[i] == class_id ? 1 : 0;
  return out;
}

inline nlohmann::json to_json(const Episode& e) {
  return {{"classes", e.classes}, {"support", e.support}, {"query", e.query}, {"mode", to_string(e.mode)}};
}

inline Episode episode_from_json(const nlohmann::json& j) {
  Episode e;
  try {
    e.classes = j.at("classes").get<std::vector<int>>();
    e.support = j.at("support").get<std::vector<std::vector<std::string>>>();
    e.query = j.at("query").get<std::string>();
    e.mode = parse_episode_mode(j.at("mode").get<std::string>());
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("episode manifest: ") + ex.what());
  }
  if (e.support.size() != e.classes.size()) throw DataError("episode manifest: support/class count mismatch");
  return e;
}

inline void write_manifest(std::ostream& out, const std::vector<Episode>& episodes) {
  for (const auto& e : episodes) out << to_json(e).dump() << '\n';
}

inline std::vector<Episode> read_manifest(std::istream& in) {
  std::vector<Episode> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& ex) {
      throw DataError(std::string("episode manifest: ") + ex.what());
    }
    out.push_back(episode_from_json(j));
  }
  return out;
}

}  // namespace mfnet
