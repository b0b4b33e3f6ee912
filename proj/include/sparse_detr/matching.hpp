#pragma once

// Minimum-cost bipartite matching between predictions and ground truths and
// the set-based detection loss built on it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "sparse_detr/boxes.hpp"
#include "sparse_detr/heads.hpp"

namespace sdetr {

/// Ground-truth boxes with class labels.
struct Targets {
  std::vector<BoxCxCyWH> boxes;
  std::vector<std::uint32_t> labels;

  std::size_t size() const { return boxes.size(); }
};

struct CostMatrix {
  std::size_t rows = 0;  // predictions
  std::size_t cols = 0;  // ground truths
  std::vector<double> values;

  CostMatrix() = default;
  CostMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}
  double& at(std::size_t i, std::size_t j) { return values[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

/// (prediction index, ground-truth index) pairs, sorted by prediction index.
struct Assignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;

  double total(const CostMatrix& c) const {
    double s = 0.0;
    for (auto [i, j] : pairs) s += c.at(i, j);
    return s;
  }
};

struct MatchWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
};

/// cost(i, j) = w_cls * (-p_i(class_j)) + w_l1 * |b_i - b_j|_1 + w_giou * (-giou(b_i, b_j))
template <typename T>
CostMatrix build_cost_matrix(const DetectionSet<T>& preds, const Targets& gts, const MatchWeights& w = {}) {
  require(preds.size() >= 1, "build_cost_matrix: at least one prediction required");
  const std::size_t m = preds.size(), c = preds.num_classes();
  const auto boxes = boxes_from_tensor(preds.boxes);
  CostMatrix cost(m, gts.size());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < gts.size(); ++j) {
      const auto& g = gts.boxes[j];
      const double p = sigmoid_value(static_cast<double>(preds.logits[i * c + gts.labels[j]]));
      const auto& b = boxes[i];
      const double l1 = std::abs(b.cx - g.cx) + std::abs(b.cy - g.cy) + std::abs(b.w - g.w) + std::abs(b.h - g.h);
      cost.at(i, j) = -w.cls * p + w.l1 * l1 - w.giou * giou(b, g);
    }
  }
  return cost;
}

/// Optimal assignment of every column to a distinct row for rows >= cols,
/// by shortest augmenting paths with dual potentials (O(rows * cols^2)).
/// Deterministic; on ties the lowest-index free row is preferred.
inline Assignment hungarian(const CostMatrix& cost) {
  const std::size_t n = cost.rows, m = cost.cols;
  if (m > n)
    throw ContractError("hungarian: more columns (" + std::to_string(m) + ") than rows (" + std::to_string(n) + ")");
  for (double v : cost.values)
    if (!std::isfinite(v)) throw ContractError("hungarian: non-finite cost");
  Assignment out;
  if (m == 0) return out;
  constexpr double inf = std::numeric_limits<double>::infinity();
  // Left side: ground truths 1..m; right side: predictions 1..n (1-based, 0 = virtual).
  std::vector<double> u(m + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> owner(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost.at(j - 1, i0 - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta || (minv[j] == delta && owner[j] == 0 && owner[j1] != 0)) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0);
  }
  for (std::size_t j = 1; j <= n; ++j)
    if (owner[j]) out.pairs.emplace_back(j - 1, owner[j] - 1);
  return out;
}

/// Matching for any shape: when there are fewer predictions than ground
/// truths, every prediction is matched and some ground truths stay unmatched.
inline Assignment match(const CostMatrix& cost) {
  if (cost.cols <= cost.rows) return hungarian(cost);
  CostMatrix t(cost.cols, cost.rows);
  for (std::size_t i = 0; i < cost.rows; ++i)
    for (std::size_t j = 0; j < cost.cols; ++j) t.at(j, i) = cost.at(i, j);
  Assignment a = hungarian(t);
  Assignment out;
  for (auto [gt, pred] : a.pairs) out.pairs.emplace_back(pred, gt);
  std::sort(out.pairs.begin(), out.pairs.end());
  return out;
}

/// Sigmoid focal loss summed over every logit; row i is positive for class
/// targets[i] (negative everywhere when targets[i] < 0).
template <typename T>
Tensor<T> sigmoid_focal_loss_sum(const Tensor<T>& logits, std::span<const int> targets, double alpha = 0.25,
                                 double gamma = 2.0) {
  detail::check_rank("sigmoid_focal_loss_sum", logits.shape(), 2);
  const std::size_t m = logits.dim(0), c = logits.dim(1);
  if (targets.size() != m) throw DimensionError("sigmoid_focal_loss_sum: one target per row required");
  auto softplus = [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); };
  std::vector<T> dlogit(m * c);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      const double x = logits[i * c + k];
      const double p = sigmoid_value(x);
      if (targets[i] == static_cast<int>(k)) {
        const double logp = -softplus(-x);
        const double q = std::pow(1.0 - p, gamma);
        total += -alpha * q * logp;
        dlogit[i * c + k] = static_cast<T>(alpha * q * (gamma * p * logp - (1.0 - p)));
      } else {
        const double log1mp = -softplus(x);
        const double q = std::pow(p, gamma);
        total += -(1.0 - alpha) * q * log1mp;
        dlogit[i * c + k] = static_cast<T>((1.0 - alpha) * q * (p - gamma * (1.0 - p) * log1mp));
      }
    }
  }
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(total));
  detail::record<T>("sigmoid_focal_loss_sum", {&logits}, y, [li = logits.impl(), d = std::move(dlogit)](std::span<const T> g) {
    T* gl = detail::grad_of(li);
    if (!gl) return;
    for (std::size_t i = 0; i < d.size(); ++i) gl[i] += g[0] * d[i];
  });
  return y;
}

/// Unweighted loss components, each normalised by max(1, #ground truths).
template <typename T>
struct HungarianLoss {
  Tensor<T> cls;
  Tensor<T> box;
  Tensor<T> giou;

  Tensor<T> weighted(const MatchWeights& w = {}) const {
    return add(add(scale(cls, static_cast<T>(w.cls)), scale(box, static_cast<T>(w.l1))), scale(giou, static_cast<T>(w.giou)));
  }
};

template <typename T>
HungarianLoss<T> hungarian_loss(const DetectionSet<T>& preds, const Targets& gts, const Assignment& assignment) {
  const std::size_t m = preds.size();
  const T norm = T(1) / static_cast<T>(std::max<std::size_t>(1, gts.size()));
  std::vector<int> cls_target(m, -1);
  std::vector<std::size_t> pred_idx;
  std::vector<BoxCxCyWH> matched;
  for (auto [i, j] : assignment.pairs) {
    if (i >= m || j >= gts.size()) throw ContractError("hungarian_loss: assignment index out of range");
    cls_target[i] = static_cast<int>(gts.labels[j]);
    pred_idx.push_back(i);
    matched.push_back(gts.boxes[j]);
  }
  HungarianLoss<T> out;
  if (m == 0) {
    out.cls = out.box = out.giou = Tensor<T>::scalar(T(0));
    return out;
  }
  out.cls = scale(sigmoid_focal_loss_sum(preds.logits, cls_target), norm);
  if (pred_idx.empty()) {
    out.box = Tensor<T>::scalar(T(0));
    out.giou = Tensor<T>::scalar(T(0));
    return out;
  }
  Tensor<T> chosen = gather_rows(preds.boxes, pred_idx);
  std::vector<T> tv;
  tv.reserve(matched.size() * 4);
  for (const auto& b : matched) {
    tv.push_back(static_cast<T>(b.cx));
    tv.push_back(static_cast<T>(b.cy));
    tv.push_back(static_cast<T>(b.w));
    tv.push_back(static_cast<T>(b.h));
  }
  Tensor<T> target({matched.size(), 4}, std::move(tv));
  out.box = scale(sum(abs(sub(chosen, target))), norm);
  out.giou = scale(giou_loss_sum(chosen, matched), norm);
  return out;
}

/// Matches predictions to ground truths and evaluates the set loss.
template <typename T>
HungarianLoss<T> set_loss(const DetectionSet<T>& preds, const Targets& gts, const MatchWeights& w = {}) {
  if (preds.size() == 0 || gts.size() == 0) return hungarian_loss(preds, gts, Assignment{});
  return hungarian_loss(preds, gts, match(build_cost_matrix(preds, gts, w)));
}

}  // namespace sdetr
