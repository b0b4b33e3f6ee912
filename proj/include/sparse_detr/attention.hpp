#pragma once

// Dense scaled dot-product attention, multi-scale deformable attention and
// the bilinear kernel G(a, b) = max(0, 1-|a_x-b_x|) * max(0, 1-|a_y-b_y|)
// shared by sampling and decoder cross-attention map construction.
//
// Coordinates: a normalised point (x, y) in [0,1]^2 maps to pixel
// (x*w - 0.5, y*h - 0.5) on an (h, w) level, so the centre of cell (i, j)
// is ((j+0.5)/w, (i+0.5)/h).

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sparse_detr/layers.hpp"
#include "sparse_detr/ops.hpp"

namespace sdetr {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

struct LevelShape {
  std::size_t h = 0;
  std::size_t w = 0;
};

/// Token metadata of a flattened multi-level feature map.
struct TokenLayout {
  std::vector<LevelShape> levels;
  std::vector<std::size_t> level_start;
  std::vector<std::uint32_t> level_of;
  std::vector<Point2> pos_of;
  std::vector<std::uint8_t> pad_mask;  // 1 = zero-padded, invalid

  static TokenLayout build(std::vector<LevelShape> levels) {
    TokenLayout t;
    t.levels = std::move(levels);
    for (std::size_t l = 0; l < t.levels.size(); ++l) {
      const auto [h, w] = t.levels[l];
      t.level_start.push_back(t.level_of.size());
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          t.level_of.push_back(static_cast<std::uint32_t>(l));
          t.pos_of.push_back({(static_cast<double>(j) + 0.5) / static_cast<double>(w),
                              (static_cast<double>(i) + 0.5) / static_cast<double>(h)});
        }
      }
    }
    t.pad_mask.assign(t.level_of.size(), 0);
    return t;
  }

  std::size_t size() const { return level_of.size(); }
  std::size_t num_valid() const {
    std::size_t n = 0;
    for (auto p : pad_mask) n += p ? 0 : 1;
    return n;
  }
  std::vector<std::uint8_t> valid_mask() const {
    std::vector<std::uint8_t> v(pad_mask.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = pad_mask[i] ? 0 : 1;
    return v;
  }
  std::size_t token_index(std::size_t level, std::size_t i, std::size_t j) const {
    return level_start[level] + i * levels[level].w + j;
  }
};

/// Flattened multi-scale token set x_feat with its layout.
template <typename T>
struct MultiScaleFeatureMap {
  TokenLayout layout;
  Tensor<T> tokens;  // [N, D]

  std::size_t size() const { return layout.size(); }
  std::size_t num_valid() const { return layout.num_valid(); }
};

struct DeformAttnConfig {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t levels = 2;
  std::size_t points = 4;

  std::size_t head_dim() const { return d_model / heads; }
  std::size_t slots_per_head() const { return levels * points; }
  std::size_t slots() const { return heads * levels * points; }

  void validate() const {
    require(heads >= 1 && d_model % heads == 0, "deformable attention: heads must divide d_model");
    require(points >= 1, "deformable attention: points per level must be >= 1");
    require(levels >= 1, "deformable attention: levels must be >= 1");
  }
};

/// Sampling locations and weights of one deformable attention call, kept for DAM construction.
struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t heads = 0;
  std::size_t levels = 0;
  std::size_t points = 0;
  std::vector<Point2> refs;        // per query
  std::vector<double> offsets;     // [query][head][level][point][xy]
  std::vector<double> weights;     // [query][head][level][point], softmax per (query, head)

  std::size_t num_queries() const { return refs.size(); }
  std::size_t slot(std::size_t q, std::size_t h, std::size_t l, std::size_t k) const {
    return ((q * heads + h) * levels + l) * points + k;
  }
  Point2 location(std::size_t q, std::size_t h, std::size_t l, std::size_t k) const {
    const auto s = slot(q, h, l, k);
    return {refs[q].x + offsets[2 * s], refs[q].y + offsets[2 * s + 1]};
  }
  double weight(std::size_t q, std::size_t h, std::size_t l, std::size_t k) const { return weights[slot(q, h, l, k)]; }
};

/// One in-grid corner of the bilinear kernel, with derivatives of its weight
/// with respect to the pixel-space sampling coordinates.
struct BilinearTap {
  std::size_t y = 0;
  std::size_t x = 0;
  double w = 0.0;
  double dwdx = 0.0;
  double dwdy = 0.0;
};

/// Corners of the bilinear kernel around pixel (px, py) that lie inside an
/// (h, w) grid. Out-of-grid corners contribute nothing. Returns the tap count.
inline std::size_t bilinear_taps(double px, double py, std::size_t h, std::size_t w, std::array<BilinearTap, 4>& taps) {
  const double x0f = std::floor(px), y0f = std::floor(py);
  const double fx = px - x0f, fy = py - y0f;
  const long x0 = static_cast<long>(x0f), y0 = static_cast<long>(y0f);
  std::size_t n = 0;
  auto add = [&](long yy, long xx, double wt, double dx, double dy) {
    if (xx < 0 || yy < 0 || xx >= static_cast<long>(w) || yy >= static_cast<long>(h)) return;
    taps[n++] = {static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), wt, dx, dy};
  };
  add(y0, x0, (1 - fx) * (1 - fy), -(1 - fy), -(1 - fx));
  add(y0, x0 + 1, fx * (1 - fy), (1 - fy), -fx);
  add(y0 + 1, x0, (1 - fx) * fy, -fy, (1 - fx));
  add(y0 + 1, x0 + 1, fx * fy, fy, fx);
  return n;
}

inline double to_pixel(double normalized, std::size_t extent) { return normalized * static_cast<double>(extent) - 0.5; }

/// Bilinear sample of value_map [h, w, D'] at a normalised point [2].
/// Differentiable with respect to both the map and the point.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& value_map, const Tensor<T>& point) {
  detail::check_rank("bilinear_sample map", value_map.shape(), 3);
  if (point.numel() != 2) throw DimensionError("bilinear_sample: point must hold 2 values");
  if (value_map.numel() == 0) throw ContractError("bilinear_sample: empty value map");
  const double x = static_cast<double>(point[0]), y = static_cast<double>(point[1]);
  if (!std::isfinite(x) || !std::isfinite(y)) throw ContractError("bilinear_sample: point is not finite");
  const std::size_t h = value_map.dim(0), w = value_map.dim(1), d = value_map.dim(2);
  std::array<BilinearTap, 4> taps;
  const std::size_t n = bilinear_taps(to_pixel(x, w), to_pixel(y, h), h, w, taps);
  std::vector<T> out(d, T(0));
  for (std::size_t t = 0; t < n; ++t) {
    const T* v = value_map.data().data() + (taps[t].y * w + taps[t].x) * d;
    for (std::size_t c = 0; c < d; ++c) out[c] += static_cast<T>(taps[t].w) * v[c];
  }
  Tensor<T> y_out({d}, std::move(out));
  detail::record<T>("bilinear_sample", {&value_map, &point}, y_out,
                    [mi = value_map.impl(), pi = point.impl(), taps, n, h, w, d](std::span<const T> g) {
                      T* gm = detail::grad_of(mi);
                      T* gp = detail::grad_of(pi);
                      for (std::size_t t = 0; t < n; ++t) {
                        const std::size_t base = (taps[t].y * w + taps[t].x) * d;
                        T dot = T(0);
                        for (std::size_t c = 0; c < d; ++c) {
                          if (gm) gm[base + c] += static_cast<T>(taps[t].w) * g[c];
                          dot += g[c] * mi->data[base + c];
                        }
                        if (gp) {
                          gp[0] += dot * static_cast<T>(taps[t].dwdx * static_cast<double>(w));
                          gp[1] += dot * static_cast<T>(taps[t].dwdy * static_cast<double>(h));
                        }
                      }
                    });
  return y_out;
}

/// Weighted multi-scale sampling core of deformable attention.
///   value   [N, D]           projected values of all tokens (padded tokens read as zero)
///   offsets [Nq, H*L*K*2]    normalised offsets added to each query's reference point
///   weights [Nq, H*L*K]      attention weights
/// Output [Nq, D]: per head, sum over (level, point) of weight * bilinear sample.
template <typename T>
Tensor<T> deformable_sample(const Tensor<T>& value, const TokenLayout& layout, std::span<const Point2> refs,
                            const Tensor<T>& offsets, const Tensor<T>& weights, const DeformAttnConfig& cfg) {
  const std::size_t nq = refs.size(), d = cfg.d_model, dh = cfg.head_dim(), H = cfg.heads, L = cfg.levels,
                    K = cfg.points, slots = cfg.slots();
  if (value.rank() != 2 || value.dim(0) != layout.size() || value.dim(1) != d)
    throw DimensionError("deformable_sample: value shape " + shape_str(value.shape()) + " does not match layout");
  if (layout.levels.size() != L) throw DimensionError("deformable_sample: layout level count differs from config");
  if (offsets.numel() != nq * slots * 2 || weights.numel() != nq * slots)
    throw DimensionError("deformable_sample: offsets/weights do not match query count and slots");
  std::vector<T> out(nq * d, T(0));
  const T* vd = value.data().data();
  std::array<BilinearTap, 4> taps;
  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t h = 0; h < H; ++h) {
      T* o = out.data() + q * d + h * dh;
      for (std::size_t l = 0; l < L; ++l) {
        const auto [lh, lw] = layout.levels[l];
        const std::size_t start = layout.level_start[l];
        for (std::size_t k = 0; k < K; ++k) {
          const std::size_t s = ((q * H + h) * L + l) * K + k;
          const double px = to_pixel(refs[q].x + static_cast<double>(offsets[2 * s]), lw);
          const double py = to_pixel(refs[q].y + static_cast<double>(offsets[2 * s + 1]), lh);
          const T a = weights[q * slots + (h * L + l) * K + k];
          const std::size_t n = bilinear_taps(px, py, lh, lw, taps);
          for (std::size_t t = 0; t < n; ++t) {
            const std::size_t tok = start + taps[t].y * lw + taps[t].x;
            if (layout.pad_mask[tok]) continue;
            const T aw = a * static_cast<T>(taps[t].w);
            const T* v = vd + tok * d + h * dh;
#pragma omp simd
            for (std::size_t c = 0; c < dh; ++c) o[c] += aw * v[c];
          }
        }
      }
    }
  }
  if (auto* c = active_counter()) c->sampling_slots += nq * H * L * K;
  Tensor<T> y({nq, d}, std::move(out));
  detail::record<T>(
      "deformable_sample", {&value, &offsets, &weights}, y,
      [vi = value.impl(), oi = offsets.impl(), wi = weights.impl(), lay = layout,
       ref = std::vector<Point2>(refs.begin(), refs.end()), cfg](std::span<const T> g) {
        const std::size_t nq_ = ref.size(), d_ = cfg.d_model, dh_ = cfg.head_dim(), H_ = cfg.heads,
                          L_ = cfg.levels, K_ = cfg.points, slots_ = cfg.slots();
        T* gv = detail::grad_of(vi);
        T* go = detail::grad_of(oi);
        T* gw = detail::grad_of(wi);
        const T* v = vi->data.data();
        std::array<BilinearTap, 4> tp;
        for (std::size_t q = 0; q < nq_; ++q) {
          for (std::size_t h = 0; h < H_; ++h) {
            const T* gq = g.data() + q * d_ + h * dh_;
            for (std::size_t l = 0; l < L_; ++l) {
              const auto [lh, lw] = lay.levels[l];
              const std::size_t start = lay.level_start[l];
              for (std::size_t k = 0; k < K_; ++k) {
                const std::size_t s = ((q * H_ + h) * L_ + l) * K_ + k;
                const double px = to_pixel(ref[q].x + static_cast<double>(oi->data[2 * s]), lw);
                const double py = to_pixel(ref[q].y + static_cast<double>(oi->data[2 * s + 1]), lh);
                const std::size_t wslot = q * slots_ + (h * L_ + l) * K_ + k;
                const T a = wi->data[wslot];
                const std::size_t n = bilinear_taps(px, py, lh, lw, tp);
                T da = T(0), dx = T(0), dy = T(0);
                for (std::size_t t = 0; t < n; ++t) {
                  const std::size_t tok = start + tp[t].y * lw + tp[t].x;
                  if (lay.pad_mask[tok]) continue;
                  const T* vt = v + tok * d_ + h * dh_;
                  const T dot = detail::dot(gq, vt, dh_);
                  da += static_cast<T>(tp[t].w) * dot;
                  dx += static_cast<T>(tp[t].dwdx) * dot;
                  dy += static_cast<T>(tp[t].dwdy) * dot;
                  if (gv) {
                    const T aw = a * static_cast<T>(tp[t].w);
                    T* gvt = gv + tok * d_ + h * dh_;
#pragma omp simd
                    for (std::size_t c = 0; c < dh_; ++c) gvt[c] += aw * gq[c];
                  }
                }
                if (gw) gw[wslot] += da;
                if (go) {
                  go[2 * s] += a * dx * static_cast<T>(lw);
                  go[2 * s + 1] += a * dy * static_cast<T>(lh);
                }
              }
            }
          }
        }
      });
  return y;
}

template <typename T>
struct DeformAttnParams {
  Linear<T> value;    // D -> D
  Linear<T> offset;   // D -> H*L*K*2, zero-initialised
  Linear<T> weight;   // D -> H*L*K
  Linear<T> output;   // D -> D

  static DeformAttnParams init(const DeformAttnConfig& cfg, Rng& rng) {
    return {Linear<T>::xavier(cfg.d_model, cfg.d_model, rng), Linear<T>::zeros(cfg.d_model, cfg.slots() * 2),
            Linear<T>::xavier(cfg.d_model, cfg.slots(), rng), Linear<T>::xavier(cfg.d_model, cfg.d_model, rng)};
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    value.collect(prefix + ".value", out);
    offset.collect(prefix + ".offset", out);
    weight.collect(prefix + ".weight", out);
    output.collect(prefix + ".output", out);
  }
};

/// Multi-scale deformable attention. Each query predicts H*L*K offsets and
/// logits; the logits are normalised per head over its L*K slots; the output
/// is the weighted sum of bilinear samples, concatenated over heads and
/// projected. When `record` is non-null it receives (r, p, A) for every slot.
template <typename T>
Tensor<T> deformable_attention(const Tensor<T>& queries, std::span<const Point2> refs, const Tensor<T>& value_input,
                               const TokenLayout& layout, const DeformAttnConfig& cfg, const DeformAttnParams<T>& params,
                               AttentionRecord* record = nullptr) {
  cfg.validate();
  detail::check_rank("deformable_attention queries", queries.shape(), 2);
  if (queries.dim(0) != refs.size()) throw DimensionError("deformable_attention: one reference point per query required");
  for (const auto& r : refs) {
    if (!(r.x >= 0.0 && r.x <= 1.0 && r.y >= 0.0 && r.y <= 1.0))
      throw ContractError("deformable_attention: reference point (" + std::to_string(r.x) + ", " + std::to_string(r.y) +
                          ") outside the unit square");
  }
  const std::size_t nq = refs.size();
  Tensor<T> value = params.value(value_input);
  Tensor<T> offsets = params.offset(queries);
  Tensor<T> logits = params.weight(queries);
  Tensor<T> weights = reshape(softmax(reshape(logits, {nq * cfg.heads, cfg.slots_per_head()}), 1), {nq, cfg.slots()});
  Tensor<T> sampled = deformable_sample(value, layout, refs, offsets, weights, cfg);
  if (record) {
    record->heads = cfg.heads;
    record->levels = cfg.levels;
    record->points = cfg.points;
    record->refs.assign(refs.begin(), refs.end());
    record->offsets.assign(offsets.data().begin(), offsets.data().end());
    record->weights.assign(weights.data().begin(), weights.data().end());
  }
  return params.output(sampled);
}

/// Multi-head scaled dot-product attention without projections.
template <typename T>
Tensor<T> dense_attention(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V, std::size_t heads,
                          bool scaled = true) {
  detail::check_rank("dense_attention Q", Q.shape(), 2);
  detail::check_rank("dense_attention K", K.shape(), 2);
  detail::check_rank("dense_attention V", V.shape(), 2);
  const std::size_t d = Q.dim(1);
  if (K.dim(1) != d || V.dim(1) != d) throw DimensionError("dense_attention: feature widths of Q, K, V differ");
  if (K.dim(0) != V.dim(0)) throw DimensionError("dense_attention: K and V row counts differ");
  if (heads == 0 || d % heads) throw ContractError("dense_attention: heads must divide the feature width");
  const std::size_t dh = d / heads;
  const T s = scaled ? T(1) / std::sqrt(static_cast<T>(dh)) : T(1);
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = slice_cols(Q, h * dh, (h + 1) * dh);
    auto kh = slice_cols(K, h * dh, (h + 1) * dh);
    auto vh = slice_cols(V, h * dh, (h + 1) * dh);
    auto p = softmax(scale(matmul_nt(qh, kh), s), 1);
    outs.push_back(matmul(p, vh));
  }
  if (auto* c = active_counter()) c->dense_pairs += Q.dim(0) * K.dim(0);
  return heads == 1 ? outs[0] : concat_cols(outs);
}

}  // namespace sdetr
