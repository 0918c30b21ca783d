#pragma once
// Dataset index over the on-disk layout
//
//   <root>/classes.txt        one "id name" per line
//   <root>/images/<name>.png  RGB image
//   <root>/masks/<name>.png   single-channel dataset labels (0 = background, 255 = ignore)
//   <root>/fold<k>.txt        optional: test class ids of fold k, one per line
//
// plus an in-memory variant used by the synthetic generator.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mfnet/core/error.hpp"
#include "mfnet/image_io.hpp"

namespace mfnet {

struct ClassInfo {
  int id = 0;
  std::string name;
  friend bool operator==(const ClassInfo&, const ClassInfo&) = default;
};

struct IndexEntry {
  std::string name;
  std::string image_path;
  std::string mask_path;
  std::vector<int> labels;  // dataset class ids present, ascending
  friend bool operator==(const IndexEntry&, const IndexEntry&) = default;
};

struct DatasetIndex {
  std::string name;
  std::vector<ClassInfo> classes;            // ascending id
  std::vector<IndexEntry> entries;           // ascending name
  std::map<int, std::vector<std::size_t>> per_class;  // class id -> entry indices, ascending

  std::vector<int> class_ids() const {
    std::vector<int> ids;
    for (const auto& c : classes) ids.push_back(c.id);
    return ids;
  }

  std::optional<std::size_t> find(const std::string& entry_name) const {
    auto it = std::lower_bound(entries.begin(), entries.end(), entry_name,
                               [](const IndexEntry& e, const std::string& n) { return e.name < n; });
    if (it == entries.end() || it->name != entry_name) return std::nullopt;
    return static_cast<std::size_t>(it - entries.begin());
  }

  void rebuild_class_lists() {
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    per_class.clear();
    for (const auto& c : classes) per_class[c.id];
    for (std::size_t i = 0; i < entries.size(); ++i)
      for (int l : entries[i].labels)
        if (per_class.count(l)) per_class[l].push_back(i);
  }

  friend bool operator==(const DatasetIndex&, const DatasetIndex&) = default;
};

struct Sample {
  RgbImage image;
  LabelMap mask;
};

// Index plus pixel data, either held in memory or read from disk on demand.
class Dataset {
 public:
  Dataset() = default;
  Dataset(DatasetIndex index, std::vector<Sample> samples)
      : index_(std::move(index)), samples_(std::move(samples)) {}
  explicit Dataset(DatasetIndex index) : index_(std::move(index)) {}

  const DatasetIndex& index() const { return index_; }

  Sample load(std::size_t entry) const {
    if (entry >= index_.entries.size()) throw DataError("dataset: entry out of range");
    if (!samples_.empty()) return samples_[entry];
    const auto& e = index_.entries[entry];
    Sample s{read_rgb_png(e.image_path), read_label_png(e.mask_path)};
    if (s.image.h != s.mask.h || s.image.w != s.mask.w)
      throw DataError("dataset: image and mask sizes differ for '" + e.name + "'");
    return s;
  }

  Sample load(const std::string& name) const {
    const auto i = index_.find(name);
    if (!i) throw DataError("dataset: unknown sample '" + name + "'");
    return load(*i);
  }

  bool in_memory() const { return !samples_.empty(); }
  const std::vector<Sample>& samples() const { return samples_; }

 private:
  DatasetIndex index_;
  std::vector<Sample> samples_;
};

inline std::vector<int> labels_in(const LabelMap& mask) {
  std::set<int> s;
  for (int v : mask.data)
    if (v != 0 && v != 255) s.insert(v);
  return {s.begin(), s.end()};
}

inline std::vector<ClassInfo> read_classes_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::vector<ClassInfo> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ClassInfo c;
    if (!(ls >> c.id)) throw DataError("classes.txt: malformed line '" + line + "'");
    std::getline(ls >> std::ws, c.name);
    out.push_back(c);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

// Scans masks/ for labels; deterministic given the file layout.
inline Dataset load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root / "images") || !fs::is_directory(root / "masks"))
    throw DataError("dataset '" + root.string() + "' lacks images/ or masks/");
  DatasetIndex idx;
  idx.name = root.filename().string();
  idx.classes = read_classes_file(root / "classes.txt");
  std::set<int> known;
  for (const auto& c : idx.classes) known.insert(c.id);
  for (const auto& f : fs::directory_iterator(root / "masks")) {
    if (f.path().extension() != ".png") continue;
    const std::string name = f.path().stem().string();
    const fs::path image = root / "images" / (name + ".png");
    if (!fs::exists(image)) throw DataError("dataset: mask '" + name + "' has no image");
    IndexEntry e{name, image.string(), f.path().string(), {}};
    for (int l : labels_in(read_label_png(f.path())))
      if (known.count(l)) e.labels.push_back(l);
    idx.entries.push_back(std::move(e));
  }
  idx.rebuild_class_lists();
  return Dataset(std::move(idx));
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  {
    std::ofstream out(root / "classes.txt");
    for (const auto& c : ds.index().classes) out << c.id << ' ' << c.name << '\n';
  }
  for (std::size_t i = 0; i < ds.index().entries.size(); ++i) {
    const auto s = ds.load(i);
    const auto& name = ds.index().entries[i].name;
    write_rgb_png(root / "images" / (name + ".png"), s.image);
    write_label_png(root / "masks" / (name + ".png"), s.mask);
  }
}

// Test class ids listed in <root>/fold<k>.txt, if the file exists.
inline std::optional<std::vector<int>> read_fold_file(const std::filesystem::path& root, std::size_t fold) {
  const auto path = root / ("fold" + std::to_string(fold) + ".txt");
  if (!std::filesystem::exists(path)) return std::nullopt;
  std::ifstream in(path);
  std::vector<int> ids;
  int v;
  while (in >> v) ids.push_back(v);
  return ids;
}

}  // namespace mfnet
