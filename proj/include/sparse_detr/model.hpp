#pragma once

// Detector assembly: patch-convolution backbone, sparsified deformable
// encoder with per-layer auxiliary heads, top-k decoder queries, decoder with
// box refinement, and the training objective.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sparse_detr/attention.hpp"
#include "sparse_detr/heads.hpp"
#include "sparse_detr/matching.hpp"
#include "sparse_detr/saliency.hpp"

namespace sdetr {

enum class Criterion { random, os, dam };
enum class NormPlacement { post_ln, pre_ln };

inline Criterion parse_criterion(std::string_view s) {
  if (s == "random") return Criterion::random;
  if (s == "os") return Criterion::os;
  if (s == "dam") return Criterion::dam;
  throw ContractError("unknown criterion '" + std::string(s) + "' (expected random, os or dam)");
}

inline std::string_view to_string(Criterion c) {
  switch (c) {
    case Criterion::random: return "random";
    case Criterion::os: return "os";
    case Criterion::dam: return "dam";
  }
  return "random";
}

inline NormPlacement parse_norm_placement(std::string_view s) {
  if (s == "post_ln") return NormPlacement::post_ln;
  if (s == "pre_ln") return NormPlacement::pre_ln;
  throw ContractError("unknown norm placement '" + std::string(s) + "' (expected post_ln or pre_ln)");
}

inline std::string_view to_string(NormPlacement n) { return n == NormPlacement::pre_ln ? "pre_ln" : "post_ln"; }

struct ModelConfig {
  double rho = 0.2;
  Criterion criterion = Criterion::dam;
  std::size_t encoder_layers = 3;
  std::size_t decoder_layers = 3;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t levels = 2;
  std::size_t points = 4;
  std::size_t ffn_dim = 128;
  std::size_t num_queries = 16;
  std::size_t num_classes = 3;
  std::size_t topk_queries = 16;
  bool use_bbox_refine = true;
  bool use_encoder_aux = true;
  NormPlacement norm_placement = NormPlacement::post_ln;
  SaliencyLossKind saliency_loss = SaliencyLossKind::bce;
  double dam_loss_weight = 1.0;
  std::size_t image_size = 64;

  DeformAttnConfig attn() const { return {d_model, heads, levels, points}; }

  /// Stride of the finest level; each further level halves the resolution.
  static constexpr std::size_t kFinestStride = 8;
  std::size_t coarsest_stride() const { return kFinestStride << (levels - 1); }

  void validate() const {
    if (!(rho >= 0.0 && rho <= 1.0)) throw ContractError("rho " + std::to_string(rho) + " outside [0, 1]");
    attn().validate();
    require(d_model % 4 == 0, "d_model must be divisible by 4 for the sine position encoding");
    require(ffn_dim >= 1, "ffn_dim must be >= 1");
    require(num_classes >= 1, "num_classes must be >= 1");
    require(topk_queries >= 1, "topk_queries must be >= 1");
    require(num_queries == topk_queries, "num_queries must equal topk_queries: decoder queries come from top-k tokens");
    require(levels >= 1 && levels <= 4, "levels must be in [1, 4]");
    require(dam_loss_weight >= 0.0, "dam_loss_weight must be >= 0");
    if (image_size == 0 || image_size % coarsest_stride())
      throw ContractError("image size " + std::to_string(image_size) + " not divisible by the coarsest stride " +
                          std::to_string(coarsest_stride()));
  }

  std::vector<LevelShape> level_shapes() const {
    std::vector<LevelShape> out;
    for (std::size_t l = 0; l < levels; ++l) {
      const std::size_t s = image_size / (kFinestStride << l);
      out.push_back({s, s});
    }
    return out;
  }
};

/// Sine encoding of normalised token centres: D/2 channels for y then D/2 for x.
template <typename T>
Tensor<T> sine_position_encoding(const TokenLayout& layout, std::size_t d) {
  const std::size_t half = d / 2, n = layout.size();
  std::vector<T> out(n * d);
  for (std::size_t t = 0; t < n; ++t) {
    const double coords[2] = {layout.pos_of[t].y, layout.pos_of[t].x};
    for (std::size_t a = 0; a < 2; ++a) {
      for (std::size_t i = 0; i < half / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(half));
        const double v = 2.0 * std::numbers::pi * coords[a] * freq;
        out[t * d + a * half + 2 * i] = static_cast<T>(std::sin(v));
        out[t * d + a * half + 2 * i + 1] = static_cast<T>(std::cos(v));
      }
    }
  }
  return Tensor<T>({n, d}, std::move(out));
}

/// Box anchors centred on each token with side twice the cell size of its level.
inline std::vector<BoxCxCyWH> token_anchors(const TokenLayout& layout) {
  std::vector<BoxCxCyWH> out(layout.size());
  for (std::size_t t = 0; t < out.size(); ++t) {
    const auto [h, w] = layout.levels[layout.level_of[t]];
    out[t] = {layout.pos_of[t].x, layout.pos_of[t].y, 2.0 / static_cast<double>(w), 2.0 / static_cast<double>(h)};
  }
  return out;
}

/// Stack of non-overlapping patch convolutions. Stage 0 folds 4x4 pixels;
/// every later stage folds 2x2 cells and emits one feature level.
template <typename T>
struct BackboneStub {
  std::vector<Linear<T>> stages;
  std::vector<Linear<T>> proj;  // one per level
  std::vector<Tensor<T>> level_embed;

  static constexpr std::size_t kStemPatch = 4;
  static constexpr std::size_t kStemWidth = 16;

  static BackboneStub init(const ModelConfig& cfg, Rng& rng) {
    BackboneStub b;
    std::size_t width = kStemWidth;
    b.stages.push_back(Linear<T>::xavier(kStemPatch * kStemPatch * 3, width, rng));
    for (std::size_t l = 0; l < cfg.levels; ++l) {
      b.stages.push_back(Linear<T>::xavier(4 * width, 2 * width, rng));
      width *= 2;
      b.proj.push_back(Linear<T>::xavier(width, cfg.d_model, rng));
      b.level_embed.push_back(uniform_param<T>({cfg.d_model}, 0.1, rng));
    }
    return b;
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    for (std::size_t s = 0; s < stages.size(); ++s) stages[s].collect(prefix + ".stage" + std::to_string(s), out);
    for (std::size_t l = 0; l < proj.size(); ++l) {
      proj[l].collect(prefix + ".proj" + std::to_string(l), out);
      out.emplace_back(prefix + ".level_embed" + std::to_string(l), level_embed[l]);
    }
  }
};

/// Image [3, H, W] to the flattened multi-scale token set x_feat.
template <typename T>
MultiScaleFeatureMap<T> backbone_stub(const BackboneStub<T>& net, const Tensor<T>& image, const ModelConfig& cfg) {
  detail::check_rank("backbone_stub image", image.shape(), 3);
  if (image.dim(0) != 3) throw DimensionError("backbone_stub: expected 3 channels, got " + shape_str(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2), stride = cfg.coarsest_stride();
  if (h % stride || w % stride)
    throw ContractError("backbone_stub: image " + std::to_string(h) + "x" + std::to_string(w) +
                        " not divisible by the coarsest stride " + std::to_string(stride));
  if (h != cfg.image_size || w != cfg.image_size)
    throw DimensionError("backbone_stub: image " + std::to_string(h) + "x" + std::to_string(w) +
                         " does not match configured size " + std::to_string(cfg.image_size));
  const std::size_t p = BackboneStub<T>::kStemPatch;
  std::size_t gh = h / p, gw = w / p;
  Tensor<T> x = gelu(net.stages[0](grid_patchify(chw_to_tokens(image), h, w, p)));
  auto shapes = cfg.level_shapes();
  TokenLayout layout = TokenLayout::build(shapes);
  std::vector<Tensor<T>> levels;
  for (std::size_t l = 0; l < cfg.levels; ++l) {
    x = gelu(net.stages[l + 1](grid_patchify(x, gh, gw, 2)));
    gh /= 2;
    gw /= 2;
    levels.push_back(add(net.proj[l](x), net.level_embed[l]));
  }
  Tensor<T> tokens = cfg.levels == 1 ? levels[0] : concat_rows(levels);
  tokens = add(tokens, sine_position_encoding<T>(layout, cfg.d_model));
  return {std::move(layout), std::move(tokens)};
}

template <typename T>
struct EncoderLayerParams {
  DeformAttnParams<T> attn;
  LayerNorm<T> norm1;
  Linear<T> ffn1;
  Linear<T> ffn2;
  LayerNorm<T> norm2;

  static EncoderLayerParams init(const ModelConfig& cfg, Rng& rng) {
    return {DeformAttnParams<T>::init(cfg.attn(), rng), LayerNorm<T>::init(cfg.d_model),
            Linear<T>::xavier(cfg.d_model, cfg.ffn_dim, rng), Linear<T>::xavier(cfg.ffn_dim, cfg.d_model, rng),
            LayerNorm<T>::init(cfg.d_model)};
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    attn.collect(prefix + ".attn", out);
    norm1.collect(prefix + ".norm1", out);
    ffn1.collect(prefix + ".ffn1", out);
    ffn2.collect(prefix + ".ffn2", out);
    norm2.collect(prefix + ".norm2", out);
  }
};

namespace detail {

/// Encoder update of `q` (rows of x at reference points `refs`), attending into all of x.
template <typename T>
Tensor<T> encoder_update(const Tensor<T>& q, std::span<const Point2> refs, const Tensor<T>& x, const TokenLayout& layout,
                         const EncoderLayerParams<T>& p, const DeformAttnConfig& cfg, NormPlacement norm) {
  if (norm == NormPlacement::post_ln) {
    Tensor<T> z = p.norm1(add(deformable_attention(q, refs, x, layout, cfg, p.attn), q));
    return p.norm2(add(p.ffn2(relu(p.ffn1(z))), z));
  }
  Tensor<T> z = add(q, deformable_attention(p.norm1(q), refs, p.norm1(x), layout, cfg, p.attn));
  return add(z, p.ffn2(relu(p.ffn1(p.norm2(z)))));
}

}  // namespace detail

/// Updates only the selected tokens; every other row is returned unchanged.
/// Selected tokens query at their own centres and attend into the full token set.
template <typename T>
Tensor<T> sparse_encoder_layer(const Tensor<T>& x, const TokenLayout& layout, const SelectionMask& mask,
                               const EncoderLayerParams<T>& p, const DeformAttnConfig& cfg,
                               NormPlacement norm = NormPlacement::post_ln) {
  if (mask.size() != x.dim(0)) throw DimensionError("sparse_encoder_layer: mask length differs from token count");
  if (mask.count() == 0) return x;
  std::vector<Point2> refs;
  refs.reserve(mask.count());
  for (auto i : mask.indices) refs.push_back(layout.pos_of[i]);
  Tensor<T> q = gather_rows(x, mask.indices);
  return scatter_rows(x, mask.indices, detail::encoder_update(q, refs, x, layout, p, cfg, norm));
}

/// Unsparsified deformable encoder layer: every token is a query.
template <typename T>
Tensor<T> dense_encoder_layer(const Tensor<T>& x, const TokenLayout& layout, const EncoderLayerParams<T>& p,
                              const DeformAttnConfig& cfg, NormPlacement norm = NormPlacement::post_ln) {
  return detail::encoder_update(x, layout.pos_of, x, layout, p, cfg, norm);
}

template <typename T>
struct DecoderLayerParams {
  Linear<T> q_proj;
  Linear<T> k_proj;
  Linear<T> v_proj;
  Linear<T> out_proj;
  LayerNorm<T> norm1;
  DeformAttnParams<T> cross;
  LayerNorm<T> norm2;
  Linear<T> ffn1;
  Linear<T> ffn2;
  LayerNorm<T> norm3;

  static DecoderLayerParams init(const ModelConfig& cfg, Rng& rng) {
    const std::size_t d = cfg.d_model;
    return {Linear<T>::xavier(d, d, rng),        Linear<T>::xavier(d, d, rng),
            Linear<T>::xavier(d, d, rng),        Linear<T>::xavier(d, d, rng),
            LayerNorm<T>::init(d),               DeformAttnParams<T>::init(cfg.attn(), rng),
            LayerNorm<T>::init(d),               Linear<T>::xavier(d, cfg.ffn_dim, rng),
            Linear<T>::xavier(cfg.ffn_dim, d, rng), LayerNorm<T>::init(d)};
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    q_proj.collect(prefix + ".q_proj", out);
    k_proj.collect(prefix + ".k_proj", out);
    v_proj.collect(prefix + ".v_proj", out);
    out_proj.collect(prefix + ".out_proj", out);
    norm1.collect(prefix + ".norm1", out);
    cross.collect(prefix + ".cross", out);
    norm2.collect(prefix + ".norm2", out);
    ffn1.collect(prefix + ".ffn1", out);
    ffn2.collect(prefix + ".ffn2", out);
    norm3.collect(prefix + ".norm3", out);
  }
};

/// All learnable parameters of the detector.
template <typename T>
struct ModelParams {
  BackboneStub<T> backbone;
  ScoringNetwork<T> scoring;
  DetectionHead<T> os_head;
  std::vector<EncoderLayerParams<T>> encoder;
  std::vector<DetectionHead<T>> encoder_aux;
  Linear<T> memory_proj;
  LayerNorm<T> memory_norm;
  DetectionHead<T> topk_head;
  Linear<T> query_pos;  // box (4) -> D
  std::vector<DecoderLayerParams<T>> decoder;
  std::vector<DetectionHead<T>> decoder_heads;

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(mix_seed(seed, 0x5D7E));
    ModelParams m;
    const std::size_t d = cfg.d_model, c = cfg.num_classes;
    m.backbone = BackboneStub<T>::init(cfg, rng);
    m.scoring = ScoringNetwork<T>::init(d, rng);
    m.os_head = DetectionHead<T>::init(d, c, rng);
    for (std::size_t i = 0; i < cfg.encoder_layers; ++i) {
      m.encoder.push_back(EncoderLayerParams<T>::init(cfg, rng));
      m.encoder_aux.push_back(DetectionHead<T>::init(d, c, rng));
    }
    m.memory_proj = Linear<T>::xavier(d, d, rng);
    m.memory_norm = LayerNorm<T>::init(d);
    m.topk_head = DetectionHead<T>::init(d, c, rng);
    m.query_pos = Linear<T>::xavier(4, d, rng);
    for (std::size_t i = 0; i < cfg.decoder_layers; ++i) {
      m.decoder.push_back(DecoderLayerParams<T>::init(cfg, rng));
      m.decoder_heads.push_back(DetectionHead<T>::init(d, c, rng));
    }
    return m;
  }

  NamedParams<T> named() const {
    NamedParams<T> out;
    backbone.collect("backbone", out);
    scoring.collect("scoring", out);
    os_head.collect("os_head", out);
    for (std::size_t i = 0; i < encoder.size(); ++i) {
      encoder[i].collect("encoder" + std::to_string(i), out);
      encoder_aux[i].collect("encoder_aux" + std::to_string(i), out);
    }
    memory_proj.collect("memory_proj", out);
    memory_norm.collect("memory_norm", out);
    topk_head.collect("topk_head", out);
    query_pos.collect("query_pos", out);
    for (std::size_t i = 0; i < decoder.size(); ++i) {
      decoder[i].collect("decoder" + std::to_string(i), out);
      decoder_heads[i].collect("decoder_head" + std::to_string(i), out);
    }
    return out;
  }

  /// Parameters grouped per layer for gradient-norm reporting: backbone stages
  /// B1.., encoder layers E1.., decoder layers D1...
  std::vector<std::pair<std::string, std::vector<Tensor<T>>>> layer_groups() const {
    std::vector<std::pair<std::string, std::vector<Tensor<T>>>> groups;
    auto flatten = [](auto collect) {
      NamedParams<T> np;
      collect(np);
      std::vector<Tensor<T>> v;
      for (auto& [_, t] : np) v.push_back(t);
      return v;
    };
    for (std::size_t s = 0; s < backbone.stages.size(); ++s) {
      groups.emplace_back("B" + std::to_string(s + 1), flatten([&](NamedParams<T>& np) {
                            backbone.stages[s].collect("", np);
                            if (s >= 1) {
                              backbone.proj[s - 1].collect("", np);
                              np.emplace_back("", backbone.level_embed[s - 1]);
                            }
                          }));
    }
    for (std::size_t i = 0; i < encoder.size(); ++i)
      groups.emplace_back("E" + std::to_string(i + 1), flatten([&](NamedParams<T>& np) { encoder[i].collect("", np); }));
    for (std::size_t i = 0; i < decoder.size(); ++i)
      groups.emplace_back("D" + std::to_string(i + 1), flatten([&](NamedParams<T>& np) { decoder[i].collect("", np); }));
    return groups;
  }
};

/// Output of the encoder stage.
template <typename T>
struct EncoderOutputs {
  Tensor<T> tokens;
  SelectionMask mask;
  Tensor<T> scoring_logits;                    // defined for criterion dam
  std::optional<DetectionSet<T>> os_output;     // defined for criterion os
  std::vector<DetectionSet<T>> aux;             // one per layer, S rows each
};

/// Computes the salient set once from x_feat and runs every encoder layer with it.
template <typename T>
EncoderOutputs<T> encoder_forward(const MultiScaleFeatureMap<T>& feat, double rho, const ModelParams<T>& params,
                                  const ModelConfig& cfg, std::uint64_t seed, bool reference_encoder = false) {
  const auto& layout = feat.layout;
  EncoderOutputs<T> out;
  switch (cfg.criterion) {
    case Criterion::random:
      out.mask = random_selection(rho, layout.pad_mask, seed);
      break;
    case Criterion::os: {
      auto anchors = token_anchors(layout);
      out.os_output = params.os_head(feat.tokens, anchors);
      out.mask = select_top_rho(objectness_scores(*out.os_output, layout.pad_mask), rho, layout.pad_mask);
      break;
    }
    case Criterion::dam:
      out.scoring_logits = score_tokens(params.scoring, feat);
      out.mask = select_top_rho(selection_scores(out.scoring_logits, layout.pad_mask), rho, layout.pad_mask);
      break;
  }
  std::vector<BoxCxCyWH> sel_anchors;
  if (cfg.use_encoder_aux) {
    const auto anchors = token_anchors(layout);
    for (auto i : out.mask.indices) sel_anchors.push_back(anchors[i]);
  }
  Tensor<T> x = feat.tokens;
  for (std::size_t i = 0; i < params.encoder.size(); ++i) {
    x = reference_encoder ? dense_encoder_layer(x, layout, params.encoder[i], cfg.attn(), cfg.norm_placement)
                          : sparse_encoder_layer(x, layout, out.mask, params.encoder[i], cfg.attn(), cfg.norm_placement);
    if (cfg.use_encoder_aux) out.aux.push_back(params.encoder_aux[i](gather_rows(x, out.mask.indices), sel_anchors));
  }
  out.tokens = x;
  return out;
}

/// Decoder object queries from the k tokens with the highest top-k head score.
template <typename T>
struct TopkQueries {
  DetectionSet<T> head_output;  // over all N tokens
  std::vector<std::size_t> indices;
  Tensor<T> features;           // [k, D]
  std::vector<BoxCxCyWH> ref_boxes;  // detached
};

template <typename T>
TopkQueries<T> topk_decoder_queries(const Tensor<T>& enc_out, const TokenLayout& layout, const ModelParams<T>& params,
                                    std::size_t k) {
  const std::size_t n_valid = layout.num_valid();
  if (k > n_valid)
    throw ContractError("topk_decoder_queries: k = " + std::to_string(k) + " exceeds " + std::to_string(n_valid) +
                        " valid tokens");
  TopkQueries<T> out;
  Tensor<T> memory = params.memory_norm(params.memory_proj(enc_out));
  out.head_output = params.topk_head(memory, token_anchors(layout));
  auto order = rank_tokens(out.head_output.max_scores(), layout.pad_mask);
  order.resize(k);
  out.indices = order;
  out.features = gather_rows(memory, out.indices);
  const auto boxes = boxes_from_tensor(out.head_output.boxes);
  for (auto i : out.indices) out.ref_boxes.push_back(boxes[i]);
  return out;
}

template <typename T>
struct DecoderOutputs {
  std::vector<DetectionSet<T>> layers;
  std::vector<AttentionRecord> records;
};

namespace detail {

template <typename T>
Tensor<T> boxes_tensor(std::span<const BoxCxCyWH> boxes) {
  std::vector<T> v;
  v.reserve(boxes.size() * 4);
  for (const auto& b : boxes) {
    v.push_back(static_cast<T>(b.cx));
    v.push_back(static_cast<T>(b.cy));
    v.push_back(static_cast<T>(b.w));
    v.push_back(static_cast<T>(b.h));
  }
  return Tensor<T>({boxes.size(), 4}, std::move(v));
}

inline std::vector<Point2> box_centres(std::span<const BoxCxCyWH> boxes) {
  std::vector<Point2> out;
  for (const auto& b : boxes) out.push_back({std::clamp(b.cx, 0.0, 1.0), std::clamp(b.cy, 0.0, 1.0)});
  return out;
}

}  // namespace detail

/// Self-attention among queries, deformable cross-attention into enc_out, FFN;
/// one detection head per layer. With refinement on, each layer's boxes
/// (detached) become the next layer's reference boxes.
template <typename T>
DecoderOutputs<T> decoder_forward(const Tensor<T>& queries, std::vector<BoxCxCyWH> ref_boxes, const Tensor<T>& enc_out,
                                  const TokenLayout& layout, const ModelParams<T>& params, const ModelConfig& cfg) {
  DecoderOutputs<T> out;
  Tensor<T> tgt = queries;
  for (std::size_t i = 0; i < params.decoder.size(); ++i) {
    const auto& p = params.decoder[i];
    Tensor<T> pos = params.query_pos(detail::boxes_tensor<T>(ref_boxes));
    Tensor<T> qk = add(tgt, pos);
    Tensor<T> sa = p.out_proj(dense_attention(p.q_proj(qk), p.k_proj(qk), p.v_proj(tgt), cfg.heads));
    tgt = p.norm1(add(tgt, sa));
    AttentionRecord rec;
    rec.layer = i;
    const auto refs = detail::box_centres(ref_boxes);
    Tensor<T> ca = deformable_attention(add(tgt, pos), refs, enc_out, layout, cfg.attn(), p.cross, &rec);
    out.records.push_back(std::move(rec));
    tgt = p.norm2(add(tgt, ca));
    tgt = p.norm3(add(tgt, p.ffn2(relu(p.ffn1(tgt)))));
    out.layers.push_back(params.decoder_heads[i](tgt, ref_boxes));
    if (cfg.use_bbox_refine) ref_boxes = boxes_from_tensor(out.layers.back().boxes);
  }
  return out;
}

struct ForwardOptions {
  double rho = 1.0;
  std::uint64_t seed = 0;          // random criterion and ranking-pair sampling
  bool reference_encoder = false;  // run every encoder layer unsparsified
};

template <typename T>
struct ForwardOutputs {
  DetectionSet<T> final;
  std::vector<DetectionSet<T>> decoder_aux;  // every decoder layer but the last
  std::vector<DetectionSet<T>> encoder_aux;  // every encoder layer, S rows each
  DetectionSet<T> topk;
  std::optional<DetectionSet<T>> os_output;
  Tensor<T> scoring_logits;
  SelectionMask mask;
  DamMap dam;
  DamMap dam_nearest;
  std::vector<AttentionRecord> records;
  TokenLayout layout;
  std::uint64_t seed = 0;
};

template <typename T>
ForwardOutputs<T> model_forward_features(const MultiScaleFeatureMap<T>& feat, const ModelParams<T>& params,
                                         const ModelConfig& cfg, const ForwardOptions& opt) {
  ForwardOutputs<T> out;
  auto enc = encoder_forward(feat, opt.rho, params, cfg, opt.seed, opt.reference_encoder);
  Tensor<T> enc_out = params.encoder.empty() ? feat.tokens : enc.tokens;
  auto topk = topk_decoder_queries(enc_out, feat.layout, params, cfg.topk_queries);
  auto dec = decoder_forward(topk.features, topk.ref_boxes, enc_out, feat.layout, params, cfg);
  if (dec.layers.empty()) throw ContractError("model_forward: at least one decoder layer is required");
  out.final = dec.layers.back();
  dec.layers.pop_back();
  out.decoder_aux = std::move(dec.layers);
  out.encoder_aux = std::move(enc.aux);
  out.topk = std::move(topk.head_output);
  out.os_output = std::move(enc.os_output);
  out.scoring_logits = std::move(enc.scoring_logits);
  out.mask = std::move(enc.mask);
  out.dam = build_dam(dec.records, feat.layout);
  out.dam_nearest = build_dam_nearest(dec.records, feat.layout);
  out.records = std::move(dec.records);
  out.layout = feat.layout;
  out.seed = opt.seed;
  return out;
}

template <typename T>
ForwardOutputs<T> model_forward(const Tensor<T>& image, const ModelParams<T>& params, const ModelConfig& cfg,
                                const ForwardOptions& opt) {
  return model_forward_features(backbone_stub(params.backbone, image, cfg), params, cfg, opt);
}

/// Total objective with its named components. Terms absent for the
/// configured criterion are absent from `terms`.
template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  std::vector<std::pair<std::string, double>> terms;

  bool has(std::string_view name) const {
    for (const auto& [k, _] : terms)
      if (k == name) return true;
    return false;
  }
  double value(std::string_view name) const {
    for (const auto& [k, v] : terms)
      if (k == name) return v;
    return 0.0;
  }
};

inline constexpr std::string_view kLossTerms[] = {"final", "dec_aux", "enc_aux", "topk", "os", "dam"};

template <typename T>
LossBreakdown<T> total_loss(const ForwardOutputs<T>& out, const Targets& gts, const ModelConfig& cfg,
                            const MatchWeights& w = {}) {
  LossBreakdown<T> lb;
  auto term = [&](const char* name, const Tensor<T>& v) {
    lb.terms.emplace_back(name, static_cast<double>(v.item()));
    lb.total = lb.total.defined() ? add(lb.total, v) : v;
  };
  auto set_sum = [&](const std::vector<DetectionSet<T>>& sets) {
    Tensor<T> acc = Tensor<T>::scalar(T(0));
    for (const auto& s : sets) acc = add(acc, set_loss(s, gts, w).weighted(w));
    return acc;
  };
  term("final", set_loss(out.final, gts, w).weighted(w));
  term("dec_aux", set_sum(out.decoder_aux));
  term("enc_aux", cfg.use_encoder_aux ? set_sum(out.encoder_aux) : Tensor<T>::scalar(T(0)));
  term("topk", set_loss(out.topk, gts, w).weighted(w));
  if (cfg.criterion == Criterion::os) {
    if (!out.os_output) throw ContractError("total_loss: objectness head output missing");
    term("os", set_loss(*out.os_output, gts, w).weighted(w));
  }
  if (cfg.criterion == Criterion::dam) {
    const auto bin = binarize_dam(out.dam, cfg.rho, out.layout.pad_mask);
    Tensor<T> l = saliency_loss(out.scoring_logits, out.dam, bin, cfg.saliency_loss, out.layout.pad_mask,
                                mix_seed(out.seed, 0xDA));
    term("dam", scale(l, static_cast<T>(cfg.dam_loss_weight)));
  }
  return lb;
}

}  // namespace sdetr
