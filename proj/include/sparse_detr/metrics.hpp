#pragma once

// Evaluation and measurement: COCO-style AP, the Corr statistic, closed-form
// attention cost, DAM coverage and per-layer gradient norms.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "sparse_detr/model.hpp"

namespace sdetr {

struct Detection {
  BoxCxCyWH box;
  std::uint32_t label = 0;
  double score = 0.0;
};

/// Every (prediction, class) pair as a scored detection, best first, at most `max_dets`.
template <typename T>
std::vector<Detection> detections_from_set(const DetectionSet<T>& set, std::size_t max_dets = 100) {
  std::vector<Detection> out;
  const auto boxes = boxes_from_tensor(set.boxes);
  const std::size_t c = set.num_classes();
  for (std::size_t i = 0; i < set.size(); ++i)
    for (std::size_t k = 0; k < c; ++k)
      out.push_back({boxes[i].clamped(), static_cast<std::uint32_t>(k), sigmoid_value(static_cast<double>(set.logits[i * c + k]))});
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (out.size() > max_dets) out.resize(max_dets);
  return out;
}

struct ApReport {
  std::vector<double> thresholds;
  std::vector<double> ap;  // per threshold, mean over classes with ground truth
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ap_mean = 0.0;    // mean over all thresholds
};

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

/// AP of one class at one IoU threshold: detections in descending score
/// order each claim the highest-IoU unclaimed ground truth of their image
/// (IoU >= threshold); precision is made monotone and read at 101 recall points.
inline double class_average_precision(const std::vector<std::vector<Detection>>& dets, const std::vector<Targets>& gts,
                                      std::uint32_t cls, double threshold) {
  struct Ref {
    std::size_t image;
    std::size_t rank;
    double score;
  };
  std::vector<Ref> order;
  std::size_t n_gt = 0;
  for (std::size_t img = 0; img < gts.size(); ++img)
    for (auto l : gts[img].labels) n_gt += l == cls ? 1 : 0;
  if (n_gt == 0) return -1.0;
  for (std::size_t img = 0; img < dets.size(); ++img)
    for (std::size_t r = 0; r < dets[img].size(); ++r)
      if (dets[img][r].label == cls) order.push_back({img, r, dets[img][r].score});
  std::stable_sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });
  std::vector<std::vector<std::uint8_t>> claimed(gts.size());
  for (std::size_t img = 0; img < gts.size(); ++img) claimed[img].assign(gts[img].size(), 0);
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& d = dets[order[i].image][order[i].rank];
    const auto& g = gts[order[i].image];
    double best = threshold;
    std::ptrdiff_t hit = -1;
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (g.labels[j] != cls || claimed[order[i].image][j]) continue;
      const double iou = box_iou(d.box, g.boxes[j]);
      if (iou >= best) {
        best = iou;
        hit = static_cast<std::ptrdiff_t>(j);
      }
    }
    if (hit >= 0) {
      claimed[order[i].image][static_cast<std::size_t>(hit)] = 1;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double total = 0.0;
  std::size_t idx = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    while (idx < recall.size() && recall[idx] < r - 1e-12) ++idx;
    if (idx < recall.size()) total += precision[idx];
  }
  return total / 101.0;
}

inline ApReport average_precision(const std::vector<std::vector<Detection>>& dets, const std::vector<Targets>& gts,
                                  std::size_t num_classes, std::vector<double> thresholds = coco_iou_thresholds()) {
  if (dets.size() != gts.size()) throw DimensionError("average_precision: one detection list per image required");
  ApReport rep;
  rep.thresholds = thresholds;
  for (double t : thresholds) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::uint32_t c = 0; c < num_classes; ++c) {
      const double ap = class_average_precision(dets, gts, c, t);
      if (ap < 0) continue;
      sum += ap;
      ++n;
    }
    rep.ap.push_back(n ? sum / static_cast<double>(n) : 0.0);
  }
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (std::abs(thresholds[i] - 0.5) < 1e-9) rep.ap50 = rep.ap[i];
    if (std::abs(thresholds[i] - 0.75) < 1e-9) rep.ap75 = rep.ap[i];
  }
  if (!rep.ap.empty()) rep.ap_mean = std::accumulate(rep.ap.begin(), rep.ap.end(), 0.0) / static_cast<double>(rep.ap.size());
  return rep;
}

struct CorrReport {
  double corr = 1.0;
  std::size_t omega_d = 0;  // |Ω_D|
  std::size_t s = 0;
};

/// Share of DAM mass on the reference set Ω_D that falls inside the selected
/// tokens. Ω_D is the set of tokens where `reference` is nonzero; an empty or
/// massless reference set gives 1.
inline CorrReport corr_metric(const DamMap& dam, const DamMap& reference, const SelectionMask& mask) {
  if (dam.size() != mask.size() || reference.size() != mask.size())
    throw DimensionError("corr_metric: DAM and mask cover different token sets");
  CorrReport rep;
  rep.s = mask.count();
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < dam.size(); ++i) {
    if (reference.values[i] <= 0.0) continue;
    ++rep.omega_d;
    den += dam.values[i];
    if (mask.contains(i)) num += dam.values[i];
  }
  rep.corr = den > 0.0 ? std::clamp(num / den, 0.0, 1.0) : 1.0;
  return rep;
}

inline CorrReport corr_metric(const DamMap& dam, const SelectionMask& mask) { return corr_metric(dam, dam, mask); }

/// Fraction of valid tokens with nonzero DAM.
inline double dam_nonzero_ratio(const DamMap& dam, std::span<const std::uint8_t> pad_mask) {
  if (dam.size() != pad_mask.size()) throw DimensionError("dam_nonzero_ratio: DAM and pad mask lengths differ");
  std::size_t valid = 0, hit = 0;
  for (std::size_t i = 0; i < dam.size(); ++i) {
    if (pad_mask[i]) continue;
    ++valid;
    hit += dam.values[i] > 0.0 ? 1 : 0;
  }
  return valid ? static_cast<double>(hit) / static_cast<double>(valid) : 0.0;
}

/// Closed-form attention cost of one forward pass.
///   dense:      N_q * N_k query-key pairs of a full self-attention encoder layer
///   deformable: N * H * L * K sampling slots per encoder layer
///   sparse:     S * H * L * K sampling slots per encoder layer
struct FlopReport {
  std::size_t tokens = 0;
  std::size_t valid_tokens = 0;
  std::size_t selected = 0;  // S
  std::uint64_t dense_pairs_per_layer = 0;
  std::uint64_t deformable_slots_per_layer = 0;
  std::uint64_t sparse_slots_per_layer = 0;
  std::uint64_t encoder_dense_pairs = 0;
  std::uint64_t encoder_deformable_slots = 0;
  std::uint64_t encoder_sparse_slots = 0;
  std::uint64_t decoder_cross_slots = 0;
  std::uint64_t decoder_self_pairs = 0;
  std::uint64_t encoder_linear_macs = 0;  // projections and FFNs of the sparsified encoder layers

  /// What the runtime counters record for a whole forward pass.
  std::uint64_t runtime_sampling_slots() const { return encoder_sparse_slots + decoder_cross_slots; }
  std::uint64_t runtime_dense_pairs() const { return decoder_self_pairs; }
};

inline FlopReport attention_flop_count(std::size_t n_tokens, std::size_t n_valid, double rho, const ModelConfig& cfg) {
  FlopReport r;
  const std::uint64_t hlk = cfg.heads * cfg.levels * cfg.points, d = cfg.d_model;
  r.tokens = n_tokens;
  r.valid_tokens = n_valid;
  r.selected = selection_count(rho, n_valid);
  r.dense_pairs_per_layer = static_cast<std::uint64_t>(n_tokens) * n_tokens;
  r.deformable_slots_per_layer = n_tokens * hlk;
  r.sparse_slots_per_layer = r.selected * hlk;
  r.encoder_dense_pairs = cfg.encoder_layers * r.dense_pairs_per_layer;
  r.encoder_deformable_slots = cfg.encoder_layers * r.deformable_slots_per_layer;
  r.encoder_sparse_slots = cfg.encoder_layers * r.sparse_slots_per_layer;
  r.decoder_cross_slots = cfg.decoder_layers * cfg.topk_queries * hlk;
  r.decoder_self_pairs = cfg.decoder_layers * static_cast<std::uint64_t>(cfg.topk_queries) * cfg.topk_queries;
  if (r.selected > 0) {
    // value projection over all tokens; offsets, weights, output and FFN over S queries.
    const std::uint64_t per_layer = n_tokens * d * d + r.selected * (d * 2 * hlk + d * hlk + d * d + 2 * d * cfg.ffn_dim);
    r.encoder_linear_macs = cfg.encoder_layers * per_layer;
  }
  return r;
}

inline FlopReport attention_flop_count(const ModelConfig& cfg, double rho) {
  std::size_t n = 0;
  for (auto [h, w] : cfg.level_shapes()) n += h * w;
  return attention_flop_count(n, n, rho, cfg);
}

/// L2 norm of the concatenated parameter gradients of each labelled group.
template <typename T>
std::vector<std::pair<std::string, double>> layerwise_grad_norm(
    const std::vector<std::pair<std::string, std::vector<Tensor<T>>>>& groups) {
  bool any = false;
  for (const auto& [_, ts] : groups)
    for (const auto& t : ts) any = any || t.has_grad();
  if (!any) throw ContractError("layerwise_grad_norm: no gradients populated; run backward first");
  std::vector<std::pair<std::string, double>> out;
  for (const auto& [label, ts] : groups) {
    double ss = 0.0;
    for (const auto& t : ts)
      for (T g : t.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
    out.emplace_back(label, std::sqrt(ss));
  }
  return out;
}

}  // namespace sdetr
