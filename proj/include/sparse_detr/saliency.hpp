#pragma once

// Encoder token saliency: the scoring network, decoder cross-attention maps
// (DAM), top-rho selection and the scoring-network objectives.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sparse_detr/attention.hpp"
#include "sparse_detr/heads.hpp"

namespace sdetr {

/// The salient token set for keeping ratio rho.
struct SelectionMask {
  double rho = 0.0;
  std::vector<std::uint8_t> selected;
  std::vector<std::size_t> indices;  // ascending

  std::size_t count() const { return indices.size(); }
  std::size_t size() const { return selected.size(); }
  bool contains(std::size_t i) const { return selected[i] != 0; }
};

/// ceil(rho * n_valid), robust to representation error in rho (0.7 * 10 selects 7).
inline std::size_t selection_count(double rho, std::size_t n_valid) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ContractError("keeping ratio " + std::to_string(rho) + " outside [0, 1]");
  const double raw = rho * static_cast<double>(n_valid);
  const auto s = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::min(s, n_valid);
}

inline SelectionMask mask_from_indices(double rho, std::size_t n, std::vector<std::size_t> idx) {
  SelectionMask m;
  m.rho = rho;
  m.selected.assign(n, 0);
  std::sort(idx.begin(), idx.end());
  for (auto i : idx) m.selected[i] = 1;
  m.indices = std::move(idx);
  return m;
}

/// Valid token indices ordered by descending score; ties by lower index.
inline std::vector<std::size_t> rank_tokens(std::span<const double> scores, std::span<const std::uint8_t> pad_mask) {
  if (!pad_mask.empty() && pad_mask.size() != scores.size())
    throw DimensionError("rank_tokens: pad mask length differs from score count");
  std::vector<std::size_t> order;
  order.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (pad_mask.empty() || !pad_mask[i]) order.push_back(i);
  auto key = [&](std::size_t i) {
    const double s = scores[i];
    return std::isnan(s) ? -std::numeric_limits<double>::infinity() : s;
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) > key(b); });
  return order;
}

/// The ceil(rho * N_valid) highest-scoring valid tokens.
inline SelectionMask select_top_rho(std::span<const double> scores, double rho, std::span<const std::uint8_t> pad_mask) {
  auto order = rank_tokens(scores, pad_mask);
  const std::size_t s = selection_count(rho, order.size());
  order.resize(s);
  return mask_from_indices(rho, scores.size(), std::move(order));
}

/// Uniform sample without replacement of ceil(rho * N_valid) valid tokens.
inline SelectionMask random_selection(double rho, std::span<const std::uint8_t> pad_mask, std::uint64_t seed) {
  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < pad_mask.size(); ++i)
    if (!pad_mask[i]) valid.push_back(i);
  const std::size_t s = selection_count(rho, valid.size());
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < s; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, valid.size() - 1);
    std::swap(valid[i], valid[pick(rng)]);
  }
  valid.resize(s);
  return mask_from_indices(rho, pad_mask.size(), std::move(valid));
}

/// Layer norm, then D -> 256 -> 128 -> 64 -> 1 with GELU between layers. Half
/// of the first layer's output is averaged over valid tokens and concatenated
/// back onto every token as a global feature.
template <typename T>
struct ScoringNetwork {
  LayerNorm<T> norm;
  Linear<T> fc1;
  Linear<T> fc2;
  Linear<T> fc3;
  Linear<T> fc4;

  static constexpr std::size_t kHidden = 256;

  static ScoringNetwork init(std::size_t d, Rng& rng) {
    return {LayerNorm<T>::init(d), Linear<T>::xavier(d, kHidden, rng), Linear<T>::xavier(kHidden, kHidden / 2, rng),
            Linear<T>::xavier(kHidden / 2, kHidden / 4, rng), Linear<T>::xavier(kHidden / 4, 1, rng)};
  }

  /// One logit per token, shape [N].
  Tensor<T> operator()(const Tensor<T>& tokens, std::span<const std::uint8_t> valid) const {
    const std::size_t n = tokens.dim(0), half = fc1.out_features() / 2;
    Tensor<T> z = gelu(fc1(norm(tokens)));
    Tensor<T> local = slice_cols(z, 0, half);
    Tensor<T> global = repeat_rows(masked_mean_rows(slice_cols(z, half, 2 * half), valid), n);
    Tensor<T> h = gelu(fc3(gelu(fc2(concat_cols<T>({local, global})))));
    return reshape(fc4(h), {n});
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    norm.collect(prefix + ".norm", out);
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
    fc3.collect(prefix + ".fc3", out);
    fc4.collect(prefix + ".fc4", out);
  }
};

/// Scoring logits for every token of x_feat.
template <typename T>
Tensor<T> score_tokens(const ScoringNetwork<T>& net, const MultiScaleFeatureMap<T>& feat) {
  return net(feat.tokens, feat.layout.valid_mask());
}

/// Selection scores from logits; padded tokens get -inf and never outrank a valid token.
template <typename T>
std::vector<double> selection_scores(const Tensor<T>& logits, std::span<const std::uint8_t> pad_mask) {
  std::vector<double> s(logits.numel());
  for (std::size_t i = 0; i < s.size(); ++i)
    s[i] = pad_mask[i] ? -std::numeric_limits<double>::infinity() : static_cast<double>(logits[i]);
  return s;
}

/// Objectness score: maximum class probability of a detection head on x_feat.
template <typename T>
std::vector<double> objectness_scores(const DetectionSet<T>& head_output, std::span<const std::uint8_t> pad_mask) {
  auto s = head_output.max_scores();
  for (std::size_t i = 0; i < s.size(); ++i)
    if (pad_mask[i]) s[i] = -std::numeric_limits<double>::infinity();
  return s;
}

/// Per-token accumulated decoder cross-attention mass.
struct DamMap {
  std::vector<double> values;

  double total() const { return std::accumulate(values.begin(), values.end(), 0.0); }
  std::size_t size() const { return values.size(); }
};

struct BinarizedDam {
  std::vector<std::uint8_t> bits;

  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1})); }
};

/// Splats every recorded sample A * G(x, r + p) onto the enclosing tokens of
/// its level. Samples off the grid lose the mass of their off-grid corners;
/// padded tokens receive nothing.
inline DamMap build_dam(std::span<const AttentionRecord> records, const TokenLayout& layout) {
  DamMap dam;
  dam.values.assign(layout.size(), 0.0);
  std::array<BilinearTap, 4> taps;
  for (const auto& rec : records) {
    if (rec.levels != layout.levels.size()) throw DimensionError("build_dam: record level count differs from layout");
    for (std::size_t q = 0; q < rec.num_queries(); ++q)
      for (std::size_t h = 0; h < rec.heads; ++h)
        for (std::size_t l = 0; l < rec.levels; ++l) {
          const auto [lh, lw] = layout.levels[l];
          for (std::size_t k = 0; k < rec.points; ++k) {
            const Point2 loc = rec.location(q, h, l, k);
            const double a = rec.weight(q, h, l, k);
            const std::size_t n = bilinear_taps(to_pixel(loc.x, lw), to_pixel(loc.y, lh), lh, lw, taps);
            for (std::size_t t = 0; t < n; ++t) {
              const std::size_t tok = layout.token_index(l, taps[t].y, taps[t].x);
              if (!layout.pad_mask[tok]) dam.values[tok] += a * taps[t].w;
            }
          }
        }
  }
  return dam;
}

/// Attributes each sample's full weight to the nearest integer location only.
inline DamMap build_dam_nearest(std::span<const AttentionRecord> records, const TokenLayout& layout) {
  DamMap dam;
  dam.values.assign(layout.size(), 0.0);
  for (const auto& rec : records) {
    if (rec.levels != layout.levels.size()) throw DimensionError("build_dam_nearest: record level count differs from layout");
    for (std::size_t q = 0; q < rec.num_queries(); ++q)
      for (std::size_t h = 0; h < rec.heads; ++h)
        for (std::size_t l = 0; l < rec.levels; ++l) {
          const auto [lh, lw] = layout.levels[l];
          for (std::size_t k = 0; k < rec.points; ++k) {
            const Point2 loc = rec.location(q, h, l, k);
            const double px = std::round(to_pixel(loc.x, lw)), py = std::round(to_pixel(loc.y, lh));
            if (!(px >= 0 && py >= 0 && px < static_cast<double>(lw) && py < static_cast<double>(lh))) continue;
            const std::size_t tok = layout.token_index(l, static_cast<std::size_t>(py), static_cast<std::size_t>(px));
            if (!layout.pad_mask[tok]) dam.values[tok] += rec.weight(q, h, l, k);
          }
        }
  }
  return dam;
}

/// Top-rho binarisation of a DAM, with the same rule as select_top_rho.
inline BinarizedDam binarize_dam(const DamMap& dam, double rho, std::span<const std::uint8_t> pad_mask) {
  return {select_top_rho(dam.values, rho, pad_mask).selected};
}

enum class SaliencyLossKind { bce, smooth_l1, ranking };

inline SaliencyLossKind parse_saliency_loss(std::string_view s) {
  if (s == "bce") return SaliencyLossKind::bce;
  if (s == "smooth_l1") return SaliencyLossKind::smooth_l1;
  if (s == "ranking") return SaliencyLossKind::ranking;
  throw ContractError("unknown saliency loss kind '" + std::string(s) + "'");
}

inline std::string_view to_string(SaliencyLossKind k) {
  switch (k) {
    case SaliencyLossKind::bce: return "bce";
    case SaliencyLossKind::smooth_l1: return "smooth_l1";
    case SaliencyLossKind::ranking: return "ranking";
  }
  return "bce";
}

/// Mean binary cross-entropy with logits over valid entries.
template <typename T>
Tensor<T> bce_with_logits_mean(const Tensor<T>& logits, std::span<const double> targets, std::span<const std::uint8_t> valid) {
  if (logits.numel() != targets.size() || targets.size() != valid.size())
    throw DimensionError("bce_with_logits_mean: logits, targets and mask lengths differ");
  std::size_t count = 0;
  for (auto v : valid) count += v ? 1 : 0;
  const double inv = count ? 1.0 / static_cast<double>(count) : 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!valid[i]) continue;
    const double x = logits[i], t = targets[i];
    total += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(total * inv));
  detail::record<T>("bce_with_logits_mean", {&logits}, y,
                    [li = logits.impl(), t = std::vector<double>(targets.begin(), targets.end()),
                     v = std::vector<std::uint8_t>(valid.begin(), valid.end()), inv](std::span<const T> g) {
                      T* gl = detail::grad_of(li);
                      if (!gl) return;
                      for (std::size_t i = 0; i < t.size(); ++i)
                        if (v[i]) gl[i] += g[0] * static_cast<T>((sigmoid_value(static_cast<double>(li->data[i])) - t[i]) * inv);
                    });
  return y;
}

/// Mean smoothed-L1 over valid entries.
template <typename T>
Tensor<T> smooth_l1_mean(const Tensor<T>& pred, std::span<const double> targets, std::span<const std::uint8_t> valid,
                         double beta = 1.0) {
  if (pred.numel() != targets.size() || targets.size() != valid.size())
    throw DimensionError("smooth_l1_mean: lengths differ");
  std::size_t count = 0;
  for (auto v : valid) count += v ? 1 : 0;
  const double inv = count ? 1.0 / static_cast<double>(count) : 0.0;
  double total = 0.0;
  std::vector<T> d(targets.size(), T(0));
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!valid[i]) continue;
    const double r = static_cast<double>(pred[i]) - targets[i];
    if (std::abs(r) < beta) {
      total += 0.5 * r * r / beta;
      d[i] = static_cast<T>(r / beta * inv);
    } else {
      total += std::abs(r) - 0.5 * beta;
      d[i] = static_cast<T>((r > 0 ? 1.0 : -1.0) * inv);
    }
  }
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(total * inv));
  detail::record<T>("smooth_l1_mean", {&pred}, y, [pi = pred.impl(), d = std::move(d)](std::span<const T> g) {
    T* gp = detail::grad_of(pi);
    if (!gp) return;
    for (std::size_t i = 0; i < d.size(); ++i) gp[i] += g[0] * d[i];
  });
  return y;
}

/// Mean over pairs (hi, lo) of max(0, margin - (logit_hi - logit_lo)).
template <typename T>
Tensor<T> pairwise_hinge_mean(const Tensor<T>& logits, std::span<const std::pair<std::size_t, std::size_t>> pairs,
                              double margin = 1.0) {
  const double inv = pairs.empty() ? 0.0 : 1.0 / static_cast<double>(pairs.size());
  double total = 0.0;
  std::vector<std::uint8_t> active(pairs.size(), 0);
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const double v = margin - (static_cast<double>(logits[pairs[p].first]) - static_cast<double>(logits[pairs[p].second]));
    if (v > 0) {
      total += v;
      active[p] = 1;
    }
  }
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(total * inv));
  detail::record<T>("pairwise_hinge_mean", {&logits}, y,
                    [li = logits.impl(), pr = std::vector<std::pair<std::size_t, std::size_t>>(pairs.begin(), pairs.end()),
                     active = std::move(active), inv](std::span<const T> g) {
                      T* gl = detail::grad_of(li);
                      if (!gl) return;
                      for (std::size_t p = 0; p < pr.size(); ++p) {
                        if (!active[p]) continue;
                        gl[pr[p].first] -= g[0] * static_cast<T>(inv);
                        gl[pr[p].second] += g[0] * static_cast<T>(inv);
                      }
                    });
  return y;
}

/// 4 * N_valid random ordered pairs (i, j) of valid tokens with DAM_i > DAM_j.
inline std::vector<std::pair<std::size_t, std::size_t>> sample_ranking_pairs(const DamMap& dam,
                                                                             std::span<const std::uint8_t> pad_mask,
                                                                             std::uint64_t seed) {
  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < dam.size(); ++i)
    if (!pad_mask[i]) valid.push_back(i);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  if (valid.size() < 2) return pairs;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, valid.size() - 1);
  for (std::size_t s = 0; s < 4 * valid.size(); ++s) {
    std::size_t a = valid[pick(rng)], b = valid[pick(rng)];
    if (dam.values[a] == dam.values[b]) continue;
    if (dam.values[a] < dam.values[b]) std::swap(a, b);
    pairs.emplace_back(a, b);
  }
  return pairs;
}

/// Scoring-network objective. Padded tokens are excluded from every mean.
///   bce:       binary cross-entropy against the binarised DAM
///   smooth_l1: smoothed-L1 between sigmoid(logit) and the min-max normalised DAM
///   ranking:   pairwise hinge (margin 1) on DAM-ordered token pairs
template <typename T>
Tensor<T> saliency_loss(const Tensor<T>& logits, const DamMap& dam, const BinarizedDam& dam_bin, SaliencyLossKind kind,
                        std::span<const std::uint8_t> pad_mask, std::uint64_t seed = 0) {
  const std::size_t n = logits.numel();
  if (dam.size() != n || pad_mask.size() != n) throw DimensionError("saliency_loss: token counts differ");
  std::vector<std::uint8_t> valid(n);
  for (std::size_t i = 0; i < n; ++i) valid[i] = pad_mask[i] ? 0 : 1;
  switch (kind) {
    case SaliencyLossKind::bce: {
      if (dam_bin.bits.size() != n) throw DimensionError("saliency_loss: binarised DAM length differs");
      std::vector<double> t(n);
      for (std::size_t i = 0; i < n; ++i) t[i] = dam_bin.bits[i] ? 1.0 : 0.0;
      return bce_with_logits_mean(logits, t, valid);
    }
    case SaliencyLossKind::smooth_l1: {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (std::size_t i = 0; i < n; ++i)
        if (valid[i]) {
          lo = std::min(lo, dam.values[i]);
          hi = std::max(hi, dam.values[i]);
        }
      std::vector<double> t(n, 0.0);
      if (hi > lo)
        for (std::size_t i = 0; i < n; ++i)
          if (valid[i]) t[i] = (dam.values[i] - lo) / (hi - lo);
      return smooth_l1_mean(sigmoid(logits), t, valid);
    }
    case SaliencyLossKind::ranking: {
      const auto pairs = sample_ranking_pairs(dam, pad_mask, seed);
      return pairwise_hinge_mean(logits, pairs);
    }
  }
  throw ContractError("saliency_loss: unknown kind");
}

}  // namespace sdetr
