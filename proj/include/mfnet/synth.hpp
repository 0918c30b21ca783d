#pragma once
// Synthetic shapes dataset: each class is a (shape, texture, colour) combo.
// Shape parameters are kept next to the rasterised masks so masks can be
// regenerated exactly.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mfnet/core/rng.hpp"
#include "mfnet/dataset.hpp"

namespace mfnet {

enum class ShapeKind { circle = 0, square = 1, triangle = 2, diamond = 3 };
inline constexpr std::size_t kShapeKinds = 4;

struct ShapeParams {
  int class_id = 0;
  ShapeKind kind = ShapeKind::circle;
  bool striped = false;
  double cy = 0, cx = 0;  // centre in pixel units
  double radius = 0;
  double angle = 0;  // radians
  friend bool operator==(const ShapeParams&, const ShapeParams&) = default;
};

struct SynthConfig {
  std::size_t num_classes = 8;
  std::size_t images_per_class = 20;
  std::size_t height = 96;
  std::size_t width = 96;
  double cooccurrence = 0.5;  // fraction of images holding a second object
  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

struct SyntheticDataset {
  Dataset dataset;
  std::vector<std::vector<ShapeParams>> shapes;  // per index entry, in paint order
};

inline ShapeKind class_shape(int class_id) { return static_cast<ShapeKind>((class_id - 1) % kShapeKinds); }
inline bool class_striped(int class_id) { return ((class_id - 1) / kShapeKinds) % 2 == 1; }

inline std::array<std::uint8_t, 3> class_colour(int class_id) {
  // Golden-ratio hue steps: consecutive ids, and so every contiguous fold
  // block, spread around the whole hue circle.
  const double turn = static_cast<double>(class_id - 1) * 0.6180339887498949;
  const double h = 6.0 * (turn - std::floor(turn));
  const double f = h - std::floor(h);
  const int sector = static_cast<int>(std::floor(h)) % 6;
  const double v = 230.0, lo = 30.0;
  const double up = lo + (v - lo) * f, down = v - (v - lo) * f;
  double r = 0, g = 0, b = 0;
  switch (sector) {
    case 0: r = v, g = up, b = lo; break;
    case 1: r = down, g = v, b = lo; break;
    case 2: r = lo, g = v, b = up; break;
    case 3: r = lo, g = down, b = v; break;
    case 4: r = up, g = lo, b = v; break;
    default: r = v, g = lo, b = down; break;
  }
  return {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)};
}

// Pixel-centre inside test; (u, v) are shape-frame coordinates.
inline bool shape_contains(const ShapeParams& s, double py, double px) {
  const double dy = py - s.cy, dx = px - s.cx;
  const double c = std::cos(s.angle), sn = std::sin(s.angle);
  const double u = c * dx + sn * dy;
  const double v = -sn * dx + c * dy;
  switch (s.kind) {
    case ShapeKind::circle: return u * u + v * v <= s.radius * s.radius;
    case ShapeKind::square: {
      const double half = 0.8 * s.radius;
      return std::abs(u) <= half && std::abs(v) <= half;
    }
    case ShapeKind::diamond: return std::abs(u) + std::abs(v) <= s.radius;
    case ShapeKind::triangle: {
      // Equilateral triangle with circumradius `radius`, apex along -v.
      for (int k = 0; k < 3; ++k) {
        const double a = 2.0 * std::numbers::pi * k / 3.0;
        const double nx = std::sin(a), ny = -std::cos(a);  // outward edge normals
        if (u * (-nx) + v * (-ny) > 0.5 * s.radius) return false;
      }
      return true;
    }
  }
  return false;
}

// Masks from stored parameters; later shapes paint over earlier ones.
inline LabelMap rasterize_mask(const std::vector<ShapeParams>& shapes, std::size_t h, std::size_t w) {
  LabelMap m(h, w, 0);
  for (const auto& s : shapes)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        if (shape_contains(s, static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5)) m.at(y, x) = s.class_id;
  return m;
}

namespace detail {

inline ShapeParams place_shape(int class_id, Rng& rng, double y0, double x0, double h, double w) {
  ShapeParams s;
  s.class_id = class_id;
  s.kind = class_shape(class_id);
  s.striped = class_striped(class_id);
  const double extent = std::min(h, w);
  s.radius = extent * rng.uniform(0.32, 0.45);
  const double margin = s.radius * 0.9;
  s.cy = y0 + rng.uniform(std::min(margin, h / 2), std::max(h - margin, h / 2));
  s.cx = x0 + rng.uniform(std::min(margin, w / 2), std::max(w - margin, w / 2));
  s.angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return s;
}

inline RgbImage paint(const std::vector<ShapeParams>& shapes, const LabelMap& mask, Rng& rng) {
  RgbImage img(mask.h, mask.w);
  const int base = 80 + static_cast<int>(rng.uniform_index(60));
  for (std::size_t y = 0; y < mask.h; ++y)
    for (std::size_t x = 0; x < mask.w; ++x) {
      const int v = base + static_cast<int>(rng.uniform_index(41)) - 20;
      auto* p = img.at(y, x);
      p[0] = p[1] = p[2] = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
    }
  for (const auto& s : shapes) {
    const auto col = class_colour(s.class_id);
    const double c = std::cos(s.angle), sn = std::sin(s.angle);
    for (std::size_t y = 0; y < mask.h; ++y)
      for (std::size_t x = 0; x < mask.w; ++x) {
        if (mask.at(y, x) != s.class_id) continue;
        double scale = 1.0;
        if (s.striped) {
          const double u = c * (static_cast<double>(x) + 0.5 - s.cx) + sn * (static_cast<double>(y) + 0.5 - s.cy);
          if (static_cast<long>(std::floor(u / 4.0)) % 2 == 0) scale = 0.55;
        }
        auto* p = img.at(y, x);
        for (int k = 0; k < 3; ++k) {
          const int noise = static_cast<int>(rng.uniform_index(21)) - 10;
          p[k] = static_cast<std::uint8_t>(std::clamp(static_cast<int>(col[k] * scale) + noise, 0, 255));
        }
      }
  }
  return img;
}

}  // namespace detail

// `images_per_class` images are generated with each class as the primary
// object; a `cooccurrence` fraction of them get a second object of another
// class in the opposite half of the frame.
inline SyntheticDataset synth_shapes(const SynthConfig& cfg, Rng& rng) {
  if (cfg.num_classes < 1) throw ConfigError("synth: need at least one class");
  if (cfg.height < 16 || cfg.width < 16) throw ConfigError("synth: image too small");
  if (cfg.cooccurrence > 0.0 && cfg.num_classes < 2)
    throw ConfigError("synth: co-occurrence needs at least two classes");
  SyntheticDataset out;
  DatasetIndex idx;
  idx.name = "synthetic";
  for (std::size_t c = 1; c <= cfg.num_classes; ++c) {
    const int id = static_cast<int>(c);
    static constexpr const char* kShapeNames[] = {"circle", "square", "triangle", "diamond"};
    idx.classes.push_back({id, std::string(class_striped(id) ? "striped_" : "solid_") +
                                   kShapeNames[static_cast<int>(class_shape(id))] + "_" + std::to_string(id)});
  }
  std::vector<Sample> samples;
  const double h = static_cast<double>(cfg.height), w = static_cast<double>(cfg.width);
  std::size_t serial = 0;
  for (std::size_t c = 1; c <= cfg.num_classes; ++c) {
    for (std::size_t i = 0; i < cfg.images_per_class; ++i) {
      std::vector<ShapeParams> shapes;
      const int primary = static_cast<int>(c);
      if (rng.uniform01() < cfg.cooccurrence) {
        auto other = static_cast<int>(rng.uniform_index(cfg.num_classes - 1)) + 1;
        if (other >= primary) ++other;
        const bool vertical_split = rng.bernoulli(0.5);
        const bool primary_first = rng.bernoulli(0.5);
        const int first = primary_first ? primary : other, second = primary_first ? other : primary;
        if (vertical_split) {
          shapes.push_back(detail::place_shape(first, rng, 0, 0, h, w / 2));
          shapes.push_back(detail::place_shape(second, rng, 0, w / 2, h, w / 2));
        } else {
          shapes.push_back(detail::place_shape(first, rng, 0, 0, h / 2, w));
          shapes.push_back(detail::place_shape(second, rng, h / 2, 0, h / 2, w));
        }
      } else {
        auto s = detail::place_shape(primary, rng, h * 0.1, w * 0.1, h * 0.8, w * 0.8);
        shapes.push_back(s);
      }
      LabelMap mask = rasterize_mask(shapes, cfg.height, cfg.width);
      RgbImage image = detail::paint(shapes, mask, rng);
      char name[32];
      std::snprintf(name, sizeof name, "img_%05zu", serial++);
      IndexEntry e{name, "", "", labels_in(mask)};
      idx.entries.push_back(std::move(e));
      samples.push_back({std::move(image), std::move(mask)});
      out.shapes.push_back(std::move(shapes));
    }
  }
  // Names are generated in ascending order, so entry order is already sorted.
  idx.rebuild_class_lists();
  out.dataset = Dataset(std::move(idx), std::move(samples));
  return out;
}

inline nlohmann::json to_json(const ShapeParams& s) {
  return {{"class_id", s.class_id}, {"kind", static_cast<int>(s.kind)}, {"striped", s.striped},
          {"cy", s.cy},             {"cx", s.cx},                       {"radius", s.radius},
          {"angle", s.angle}};
}

inline ShapeParams shape_from_json(const nlohmann::json& j) {
  ShapeParams s;
  s.class_id = j.at("class_id").get<int>();
  s.kind = static_cast<ShapeKind>(j.at("kind").get<int>());
  s.striped = j.at("striped").get<bool>();
  s.cy = j.at("cy").get<double>();
  s.cx = j.at("cx").get<double>();
  s.radius = j.at("radius").get<double>();
  s.angle = j.at("angle").get<double>();
  return s;
}

// Writes the standard layout plus shapes.jsonl (one record per image).
inline void write_synthetic(const SyntheticDataset& sd, const std::filesystem::path& root) {
  write_dataset(sd.dataset, root);
  std::ofstream out(root / "shapes.jsonl");
  const auto& entries = sd.dataset.index().entries;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    nlohmann::json rec{{"name", entries[i].name}, {"shapes", nlohmann::json::array()}};
    for (const auto& s : sd.shapes[i]) rec["shapes"].push_back(to_json(s));
    out << rec.dump() << '\n';
  }
}

}  // namespace mfnet
