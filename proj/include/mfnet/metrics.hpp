#pragma once
// Confusion accumulation for the standard mIoU protocol and the corrected
// mIoU* protocol, scoring, and aggregation over repeated runs.

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "mfnet/core/error.hpp"
#include "mfnet/core/tensor.hpp"

namespace mfnet {

enum class Protocol { miou, miou_star };

inline std::string to_string(Protocol p) { return p == Protocol::miou ? "miou" : "miou_star"; }

inline Protocol parse_protocol(const std::string& s) {
  if (s == "miou") return Protocol::miou;
  if (s == "miou_star") return Protocol::miou_star;
  throw ConfigError("unknown protocol '" + s + "'");
}

struct ClassCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  friend bool operator==(const ClassCounts&, const ClassCounts&) = default;
};

// Per dataset class counts. Merging is a field-wise sum, so partial states
// from independent workers combine in any order.
struct ConfusionState {
  Protocol protocol = Protocol::miou_star;
  std::map<int, ClassCounts> classes;

  ConfusionState& merge(const ConfusionState& other) {
    if (other.protocol != protocol) throw ConfigError("merge: protocol mismatch");
    for (const auto& [cls, c] : other.classes) {
      auto& dst = classes[cls];
      dst.tp += c.tp;
      dst.fp += c.fp;
      dst.fn += c.fn;
    }
    return *this;
  }

  friend bool operator==(const ConfusionState&, const ConfusionState&) = default;
};

// pred / gt carry episode-local labels 0..N; episode_classes[n-1] is the
// dataset class id of label n. A pixel of class l predicted as an episode
// class absent from the query is a false negative of l under both
// protocols, and additionally a false positive of the predicted class under
// mIoU* only.
inline void accumulate(ConfusionState& state, const LabelMap& pred, const LabelMap& gt,
                       const std::vector<int>& episode_classes) {
  if (pred.h != gt.h || pred.w != gt.w) throw DataError("accumulate: mask sizes differ");
  const int ways = static_cast<int>(episode_classes.size());
  std::vector<bool> present(static_cast<std::size_t>(ways) + 1, false);
  for (int g : gt.data) {
    if (g < 0 || g > ways) throw DataError("accumulate: gt label " + std::to_string(g) + " out of range");
    present[static_cast<std::size_t>(g)] = true;
  }
  for (int p : pred.data)
    if (p < 0 || p > ways) throw DataError("accumulate: predicted label " + std::to_string(p) + " out of range");
  for (int cls : episode_classes) state.classes[cls];

  for (std::size_t i = 0; i < gt.size(); ++i) {
    const int g = gt.data[i], p = pred.data[i];
    if (g == p) {
      if (g > 0) ++state.classes[episode_classes[static_cast<std::size_t>(g - 1)]].tp;
      continue;
    }
    if (g > 0) ++state.classes[episode_classes[static_cast<std::size_t>(g - 1)]].fn;
    if (p > 0) {
      const bool object_into_absent = g > 0 && !present[static_cast<std::size_t>(p)];
      if (!object_into_absent || state.protocol == Protocol::miou_star)
        ++state.classes[episode_classes[static_cast<std::size_t>(p - 1)]].fp;
    }
  }
}

struct Score {
  std::map<int, double> per_class;  // classes with a non-zero denominator
  double mean = 0.0;
};

// IoU_l = tp / (tp + fp + fn); classes with a zero denominator are left out.
// When `classes` is non-empty only those ids enter the mean.
inline Score score(const ConfusionState& state, const std::set<int>& classes = {}) {
  Score s;
  for (const auto& [cls, c] : state.classes) {
    if (!classes.empty() && !classes.count(cls)) continue;
    const std::int64_t denom = c.tp + c.fp + c.fn;
    if (denom == 0) continue;
    s.per_class[cls] = static_cast<double>(c.tp) / static_cast<double>(denom);
  }
  if (s.per_class.empty()) throw UndefinedScoreError("score: every class has a zero denominator");
  double total = 0.0;
  for (const auto& [cls, iou] : s.per_class) total += iou;
  s.mean = total / static_cast<double>(s.per_class.size());
  return s;
}

struct RunAggregate {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for a single run
  std::size_t runs = 0;
};

inline RunAggregate aggregate_runs(const std::vector<double>& scores) {
  if (scores.empty()) throw ConfigError("aggregate_runs: no runs");
  RunAggregate a;
  a.runs = scores.size();
  a.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
  if (scores.size() > 1) {
    double ss = 0.0;
    for (double v : scores) ss += (v - a.mean) * (v - a.mean);
    a.stddev = std::sqrt(ss / static_cast<double>(scores.size() - 1));
  }
  return a;
}

}  // namespace mfnet
