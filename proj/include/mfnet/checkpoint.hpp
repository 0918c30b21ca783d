#pragma once
// Checkpoint container.
//
// Layout (all integers little-endian):
//   magic    8 bytes  "MFNETCKP"
//   version  u32      kCheckpointVersion
//   hlen     u64      length of the JSON header
//   header   hlen bytes of UTF-8 JSON:
//              {"dtype": "f32"|"f64", "config": "<key = value text>",
//               "params": [{"group", "name", "shape": [h, w, c], "offset", "count"}]}
//   payload  parameter values, little-endian IEEE-754, at the listed element offsets

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mfnet/config.hpp"
#include "mfnet/core/error.hpp"
#include "mfnet/network.hpp"

namespace mfnet {

inline constexpr char kCheckpointMagic[8] = {'M', 'F', 'N', 'E', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
void write_le(std::ostream& out, U v) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U read_le(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw CheckpointError("checkpoint: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  U v;
  std::memcpy(&v, bytes, sizeof(U));
  return v;
}

template <typename T>
constexpr const char* dtype_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

}  // namespace detail

struct ManifestEntry {
  std::string group;
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t count = 0;
};

struct CheckpointContents {
  std::string dtype;
  TrainConfig config;
  std::vector<ManifestEntry> manifest;
  std::vector<unsigned char> payload;  // raw little-endian bytes

  const ManifestEntry* find(const std::string& group, const std::string& name) const {
    for (const auto& e : manifest)
      if (e.group == group && e.name == name) return &e;
    return nullptr;
  }
  std::vector<std::string> groups() const {
    std::vector<std::string> g;
    for (const auto& e : manifest)
      if (std::find(g.begin(), g.end(), e.group) == g.end()) g.push_back(e.group);
    return g;
  }
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const TrainConfig& cfg) {
  nlohmann::json header;
  header["dtype"] = detail::dtype_tag<T>();
  header["config"] = to_text(cfg);
  header["params"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  std::vector<const Tensor<T>*> order;
  for (const auto& [group, params] : model.groups()) {
    for (const auto& p : params) {
      const Shape s = p.var->value.shape();
      header["params"].push_back({{"group", group},
                                  {"name", p.name},
                                  {"shape", {s.h, s.w, s.c}},
                                  {"offset", offset},
                                  {"count", s.size()}});
      offset += s.size();
      order.push_back(&p.var->value);
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::write_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string text = header.dump();
  detail::write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Tensor<T>* t : order)
    for (T v : t->values()) detail::write_le<T>(out, v);
  if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
}

inline CheckpointContents read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointError("checkpoint: bad magic in '" + path.string() + "'");
  const auto version = detail::read_le<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const auto hlen = detail::read_le<std::uint64_t>(in);
  std::string text(hlen, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(hlen))) throw CheckpointError("checkpoint: truncated header");
  CheckpointContents c;
  try {
    const auto header = nlohmann::json::parse(text);
    c.dtype = header.at("dtype").get<std::string>();
    c.config = parse_config(header.at("config").get<std::string>());
    for (const auto& p : header.at("params")) {
      ManifestEntry e;
      e.group = p.at("group").get<std::string>();
      e.name = p.at("name").get<std::string>();
      const auto s = p.at("shape").get<std::vector<std::size_t>>();
      if (s.size() != 3) throw CheckpointError("checkpoint: shape of " + e.group + "/" + e.name + " is not rank 3");
      e.shape = {s[0], s[1], s[2]};
      e.offset = p.at("offset").get<std::uint64_t>();
      e.count = p.at("count").get<std::uint64_t>();
      c.manifest.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw CheckpointError(std::string("checkpoint: malformed header: ") + ex.what());
  }
  if (c.dtype != "f32" && c.dtype != "f64") throw CheckpointError("checkpoint: unknown dtype '" + c.dtype + "'");
  c.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  const std::size_t elem = c.dtype == "f32" ? 4 : 8;
  for (const auto& e : c.manifest) {
    if (e.count != e.shape.size())
      throw CheckpointError("checkpoint: " + e.group + "/" + e.name + " manifest count " + std::to_string(e.count) +
                            " disagrees with shape " + e.shape.str());
    if ((e.offset + e.count) * elem > c.payload.size())
      throw CheckpointError("checkpoint: " + e.group + "/" + e.name + " extends past the payload");
  }
  return c;
}

namespace detail {

template <typename T>
void copy_values(const CheckpointContents& c, const ManifestEntry& e, Tensor<T>& dst) {
  const unsigned char* base = c.payload.data();
  for (std::uint64_t i = 0; i < e.count; ++i) {
    if (c.dtype == "f32") {
      unsigned char b[4];
      std::memcpy(b, base + (e.offset + i) * 4, 4);
      if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + 4);
      float v;
      std::memcpy(&v, b, 4);
      dst[i] = static_cast<T>(v);
    } else {
      unsigned char b[8];
      std::memcpy(b, base + (e.offset + i) * 8, 8);
      if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + 8);
      double v;
      std::memcpy(&v, b, 8);
      dst[i] = static_cast<T>(v);
    }
  }
}

}  // namespace detail

// Copies the listed groups (all when empty) into `model`, verifying every
// shape against the manifest first. Nothing is modified on failure.
template <typename T>
void load_parameters(const CheckpointContents& c, Model<T>& model, const std::vector<std::string>& only = {}) {
  const auto wanted = [&](const std::string& g) {
    return only.empty() || std::find(only.begin(), only.end(), g) != only.end();
  };
  const auto groups = model.groups();
  std::vector<std::string> heads;
  for (const auto& g : c.groups())
    if (g.rfind("decoder[", 0) == 0) heads.push_back(g);
  std::vector<std::string> problems;
  std::vector<std::pair<const ManifestEntry*, Tensor<T>*>> plan;
  for (const auto& [group, params] : groups) {
    if (!wanted(group)) continue;
    if (group.rfind("decoder[", 0) == 0 && std::find(heads.begin(), heads.end(), group) == heads.end()) {
      std::string have;
      for (const auto& h : heads) have += (have.empty() ? "" : ", ") + h;
      throw CheckpointError("checkpoint: decoder head mismatch: config requires " + group + ", checkpoint has [" +
                            have + "]");
    }
    for (const auto& p : params) {
      const ManifestEntry* e = c.find(group, p.name);
      if (!e) {
        problems.push_back(group + "/" + p.name + ": missing from checkpoint");
        continue;
      }
      if (!(e->shape == p.var->value.shape())) {
        problems.push_back(group + "/" + p.name + ": checkpoint " + e->shape.str() + " vs model " +
                           p.var->value.shape().str());
        continue;
      }
      plan.push_back({e, &p.var->value});
    }
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint: shape manifest mismatch:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw CheckpointError(msg);
  }
  for (auto& [e, dst] : plan) detail::copy_values(c, *e, *dst);
}

template <typename T>
void load_checkpoint(const std::filesystem::path& path, Model<T>& model) {
  load_parameters(read_checkpoint(path), model);
}

// Rebuilds the model described by the embedded config and loads it.
template <typename T>
std::pair<TrainConfig, Model<T>> load_model(const std::filesystem::path& path) {
  auto c = read_checkpoint(path);
  TrainConfig cfg = c.config;
  cfg.model.backbone.weights.clear();
  Model<T> model(cfg.model);
  load_parameters(c, model);
  return {c.config, std::move(model)};
}

// FNV-1a over every parameter's raw bytes in group/name order.
template <typename T>
std::uint64_t parameter_hash(const Model<T>& model) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : model.all_parameters()) {
    for (char ch : p.name) {
      h ^= static_cast<unsigned char>(ch);
      h *= 1099511628211ULL;
    }
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.var->value.data());
    for (std::size_t i = 0; i < p.var->value.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace mfnet
