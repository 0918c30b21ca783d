#pragma once
// Multi-way encoding (query/prototype fusion per class, then across classes)
// and the N+1-way decoder with the metric-learning embedding tap.

#include <map>
#include <string>
#include <vector>

#include "mfnet/attention.hpp"
#include "mfnet/core/autograd.hpp"
#include "mfnet/core/layers.hpp"
#include "mfnet/features.hpp"

namespace mfnet {

// First letter: fusion of the query with one class prototype; second letter:
// fusion across classes. A = element-wise add, C = channel concat.
enum class FusionMode { AC, CC, AA, CA };

inline std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::AC: return "A+C";
    case FusionMode::CC: return "C+C";
    case FusionMode::AA: return "A+A";
    case FusionMode::CA: return "C+A";
  }
  return "?";
}

inline FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "A+C" || s == "AC") return FusionMode::AC;
  if (s == "C+C" || s == "CC") return FusionMode::CC;
  if (s == "A+A" || s == "AA") return FusionMode::AA;
  if (s == "C+A" || s == "CA") return FusionMode::CA;
  throw ConfigError("unknown fusion mode '" + s + "'");
}

inline bool query_fusion_is_add(FusionMode m) { return m == FusionMode::AC || m == FusionMode::AA; }
inline bool class_fusion_is_concat(FusionMode m) { return m == FusionMode::AC || m == FusionMode::CC; }

struct ModelConfig {
  std::size_t ways = 2;        // N
  std::size_t scales = 4;      // Z
  std::size_t relation_groups = 4;  // N_r
  FusionMode fusion = FusionMode::AC;
  bool use_relation = true;    // A^S
  bool use_scale_attention = true;  // A^M
  BackboneConfig backbone{};
  std::uint64_t init_seed = 7;

  std::size_t channels() const { return backbone.output_channels; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct Decoder {
  Conv2d<T> reduce;  // in -> C, followed by relu; its output is the embedding tap
  ResidualBlock<T> residual;
  Conv2d<T> classify;  // C -> N + 1

  Decoder() = default;
  Decoder(std::size_t in, std::size_t c, std::size_t ways, Rng& rng)
      : reduce(in, c, 1, 1, rng), residual(c, rng), classify(c, ways + 1, 1, 1, rng, true, 0.5) {}

  std::size_t ways() const { return classify.out_channels() - 1; }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    reduce.collect(prefix + ".reduce", out);
    residual.collect(prefix + ".residual", out);
    classify.collect(prefix + ".classify", out);
  }
};

template <typename T>
struct QuerySupportEmbedding {
  ad::Var<T> data;  // H x W x (N*C) for concat fusion, H x W x C for add fusion
  std::vector<std::size_t> class_order;
};

template <typename T>
struct SegPrediction {
  ad::Var<T> logits;     // feature resolution, N + 1 channels
  ad::Var<T> probs;      // query resolution, softmax after upsampling
  ad::Var<T> embedding;  // feature resolution, C channels
};

inline std::string decoder_group(std::size_t ways) { return "decoder[" + std::to_string(ways) + "]"; }

template <typename T>
class Model {
 public:
  Model() = default;

  explicit Model(const ModelConfig& cfg) : cfg_(cfg), backbone_(cfg.backbone) {
    const std::size_t c = cfg.channels();
    if (cfg.ways == 0) throw ConfigError("N must be >= 1");
    if (cfg.scales == 0) throw ConfigError("Z must be >= 1");
    Rng rng(cfg.init_seed);
    relation_ = RelationParams<T>(c, cfg.relation_groups, rng);
    scale_attn_ = ScaleAttnParams<T>(c, rng);
    fusion_proj_ = Conv2d<T>(2 * c, c, 1, 1, rng);
    add_decoder(cfg.ways, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const Backbone<T>& backbone() const { return backbone_; }
  RelationParams<T>& relation() { return relation_; }
  const RelationParams<T>& relation() const { return relation_; }
  const ScaleAttnParams<T>& scale_attention_params() const { return scale_attn_; }
  ScaleAttnParams<T>& scale_attention_params() { return scale_attn_; }
  const Conv2d<T>& fusion_projection() const { return fusion_proj_; }

  bool has_decoder(std::size_t ways) const { return decoders_.count(ways) != 0; }
  const Decoder<T>& decoder(std::size_t ways) const {
    auto it = decoders_.find(ways);
    if (it == decoders_.end()) throw ConfigError("no decoder head for N=" + std::to_string(ways));
    return it->second;
  }

  std::size_t decoder_input_channels(std::size_t ways) const {
    return class_fusion_is_concat(cfg_.fusion) ? ways * cfg_.channels() : cfg_.channels();
  }

  void add_decoder(std::size_t ways, Rng& rng) {
    decoders_.insert_or_assign(ways, Decoder<T>(decoder_input_channels(ways), cfg_.channels(), ways, rng));
  }

  // Named parameter groups; the backbone group is frozen and excluded from
  // `trainable()`.
  std::map<std::string, ParamList<T>> groups() const {
    std::map<std::string, ParamList<T>> g;
    g["backbone"] = backbone_.parameters();
    relation_.collect("relation", g["relation"]);
    scale_attn_.collect("scale_attn", g["scale_attn"]);
    fusion_proj_.collect("fusion", g["fusion"]);
    for (const auto& [ways, dec] : decoders_) dec.collect("decoder", g[decoder_group(ways)]);
    return g;
  }

  ParamList<T> trainable() const {
    ParamList<T> out;
    for (auto& [name, list] : groups()) {
      if (name == "backbone") continue;
      for (auto& p : list) out.push_back({name + "/" + p.name, p.var});
    }
    return out;
  }

  ParamList<T> all_parameters() const {
    ParamList<T> out;
    for (auto& [name, list] : groups())
      for (auto& p : list) out.push_back({name + "/" + p.name, p.var});
    return out;
  }

 private:
  ModelConfig cfg_{};
  Backbone<T> backbone_;
  RelationParams<T> relation_;
  ScaleAttnParams<T> scale_attn_;
  Conv2d<T> fusion_proj_;
  std::map<std::size_t, Decoder<T>> decoders_;
};

// Fuses Z query scales with N class prototypes into one embedding at the
// native (scale-1) resolution.
template <typename T>
QuerySupportEmbedding<T> encode(const Model<T>& model, const std::vector<ad::Var<T>>& query_scales,
                                const std::vector<ad::Var<T>>& prototypes) {
  const ModelConfig& cfg = model.config();
  if (query_scales.empty()) throw ConfigError("encode: no query scales");
  if (prototypes.empty()) throw ConfigError("encode: no prototypes");
  const std::size_t c = cfg.channels();
  for (const auto& q : query_scales)
    if (q->value.channels() != c) throw ConfigError("encode: query channel mismatch");
  for (const auto& p : prototypes)
    if (p->value.size() != c) throw ConfigError("encode: prototype channel mismatch");
  const std::size_t h = query_scales[0]->value.height();
  const std::size_t w = query_scales[0]->value.width();

  std::vector<ad::Var<T>> per_class;
  QuerySupportEmbedding<T> emb;
  for (std::size_t n = 0; n < prototypes.size(); ++n) {
    std::vector<ScaleBranch<T>> branches;
    for (const auto& q : query_scales) {
      ad::Var<T> x;
      if (query_fusion_is_add(cfg.fusion)) {
        x = ad::add_broadcast(q, prototypes[n]);
      } else {
        x = model.fusion_projection()(ad::concat_channels<T>(
            {q, ad::broadcast(prototypes[n], q->value.height(), q->value.width())}));
      }
      branches.push_back(scale_attention(x, model.scale_attention_params(), cfg.use_scale_attention));
    }
    per_class.push_back(combine_scales(branches, h, w, cfg.use_scale_attention));
    emb.class_order.push_back(n + 1);
  }
  emb.data = class_fusion_is_concat(cfg.fusion) ? ad::concat_channels(per_class) : ad::sum(per_class);
  return emb;
}

template <typename T>
SegPrediction<T> decode(const Model<T>& model, const QuerySupportEmbedding<T>& emb, std::size_t query_h,
                        std::size_t query_w) {
  const std::size_t ways = emb.class_order.size();
  if (!model.has_decoder(ways))
    throw ConfigError("decode: no decoder head for N=" + std::to_string(ways));
  const Decoder<T>& dec = model.decoder(ways);
  if (emb.data->value.channels() != dec.reduce.in_channels())
    throw ConfigError("decode: embedding has " + std::to_string(emb.data->value.channels()) +
                      " channels, decoder head expects " + std::to_string(dec.reduce.in_channels()));
  SegPrediction<T> out;
  out.embedding = ad::relu(dec.reduce(emb.data));
  out.logits = dec.classify(dec.residual(out.embedding));
  out.probs = ad::softmax_channels(ad::upsample_bilinear(out.logits, query_h, query_w));
  return out;
}

// Backbone outputs for one episode: the query map plus the pooled vector of
// every support shot. Independent of trainable parameters.
template <typename T>
struct EpisodeFeatures {
  FeatureMap<T> query;
  std::vector<std::vector<Prototype<T>>> shots;  // [N][K]
  std::size_t fallbacks = 0;
};

template <typename T>
struct SupportShot {
  Tensor<T> image;
  LabelMap mask;  // non-zero = foreground
};

template <typename T>
EpisodeFeatures<T> extract_episode_features(const Model<T>& model, const Tensor<T>& query,
                                            const std::vector<std::vector<SupportShot<T>>>& support) {
  EpisodeFeatures<T> f;
  f.query = model.backbone().extract(query);
  for (std::size_t n = 0; n < support.size(); ++n) {
    std::vector<Prototype<T>> shots;
    for (const auto& s : support[n]) {
      auto p = masked_global_pool(model.backbone().extract(s.image), s.mask);
      p.class_index = n + 1;
      f.fallbacks += p.fallback ? 1 : 0;
      shots.push_back(std::move(p));
    }
    f.shots.push_back(std::move(shots));
  }
  return f;
}

// extract -> multiscale -> pool (-> relation) -> encode -> decode.
template <typename T>
SegPrediction<T> forward_features(const Model<T>& model, const EpisodeFeatures<T>& feats, std::size_t query_h,
                                  std::size_t query_w) {
  const ModelConfig& cfg = model.config();
  std::vector<ad::Var<T>> scales;
  for (auto& s : multiscale_query(feats.query, cfg.scales)) scales.push_back(ad::constant(std::move(s.data)));
  std::vector<ad::Var<T>> prototypes;
  for (const auto& shots : feats.shots) {
    if (shots.empty()) throw ConfigError("forward: class with no support shots");
    std::vector<ad::Var<T>> rows;
    for (const auto& s : shots) rows.push_back(ad::constant(s.data));
    prototypes.push_back(class_prototype(ad::stack_rows(rows), model.relation(), cfg.use_relation));
  }
  return decode(model, encode(model, scales, prototypes), query_h, query_w);
}

template <typename T>
SegPrediction<T> forward_episode(const Model<T>& model, const Tensor<T>& query,
                                 const std::vector<std::vector<SupportShot<T>>>& support) {
  return forward_features(model, extract_episode_features(model, query, support), query.height(),
                          query.width());
}

}  // namespace mfnet
