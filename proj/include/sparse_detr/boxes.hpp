#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "sparse_detr/ops.hpp"

namespace sdetr {

/// Box in normalised centre/size form.
struct BoxCxCyWH {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x1() const { return cx - 0.5 * w; }
  double y1() const { return cy - 0.5 * h; }
  double x2() const { return cx + 0.5 * w; }
  double y2() const { return cy + 0.5 * h; }
  double area() const { return w * h; }

  /// Clipped to the unit square, as used at evaluation time.
  BoxCxCyWH clamped() const {
    const double a = std::clamp(x1(), 0.0, 1.0), b = std::clamp(y1(), 0.0, 1.0);
    const double c = std::clamp(x2(), 0.0, 1.0), d = std::clamp(y2(), 0.0, 1.0);
    return {0.5 * (a + c), 0.5 * (b + d), c - a, d - b};
  }
};

inline double box_iou(const BoxCxCyWH& a, const BoxCxCyWH& b) {
  const double iw = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double ih = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Generalised IoU in [-1, 1]. Zero-area boxes violate the contract.
inline double giou(const BoxCxCyWH& a, const BoxCxCyWH& b) {
  if (!(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0)) throw ContractError("giou: zero-area box");
  const double iw = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double ih = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double hull = (std::max(a.x2(), b.x2()) - std::min(a.x1(), b.x1())) *
                      (std::max(a.y2(), b.y2()) - std::min(a.y1(), b.y1()));
  return inter / uni - (hull - uni) / hull;
}

template <typename T>
std::vector<BoxCxCyWH> boxes_from_tensor(const Tensor<T>& boxes) {
  std::vector<BoxCxCyWH> out(boxes.numel() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = {static_cast<double>(boxes[4 * i]), static_cast<double>(boxes[4 * i + 1]),
              static_cast<double>(boxes[4 * i + 2]), static_cast<double>(boxes[4 * i + 3])};
  }
  return out;
}

/// Sum over rows of (1 - GIoU(pred_i, target_i)). `pred` is [P, 4] in cxcywh;
/// targets are constants.
template <typename T>
Tensor<T> giou_loss_sum(const Tensor<T>& pred, std::span<const BoxCxCyWH> targets) {
  detail::check_rank("giou_loss_sum", pred.shape(), 2);
  if (pred.dim(1) != 4 || pred.dim(0) != targets.size())
    throw DimensionError("giou_loss_sum: expected [" + std::to_string(targets.size()) + ",4] predictions, got " +
                         shape_str(pred.shape()));
  constexpr double tiny = 1e-12;
  const std::size_t n = targets.size();
  // Per row: d(giou)/d(cx, cy, w, h).
  std::vector<std::array<double, 4>> dgiou(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double cx = pred[4 * i], cy = pred[4 * i + 1], w = pred[4 * i + 2], h = pred[4 * i + 3];
    const double x1 = cx - 0.5 * w, x2 = cx + 0.5 * w, y1 = cy - 0.5 * h, y2 = cy + 0.5 * h;
    const auto& t = targets[i];
    const double tx1 = t.x1(), tx2 = t.x2(), ty1 = t.y1(), ty2 = t.y2();
    const double iw_raw = std::min(x2, tx2) - std::max(x1, tx1);
    const double ih_raw = std::min(y2, ty2) - std::max(y1, ty1);
    const double iw = std::max(0.0, iw_raw), ih = std::max(0.0, ih_raw);
    const double inter = iw * ih;
    const double ap = w * h, at = t.w * t.h;
    const double uni = std::max(ap + at - inter, tiny);
    const double cw = std::max(x2, tx2) - std::min(x1, tx1);
    const double ch = std::max(y2, ty2) - std::min(y1, ty1);
    const double hull = std::max(cw * ch, tiny);
    total += 1.0 - (inter / uni + uni / hull - 1.0);

    const double dI = 1.0 / uni + inter / (uni * uni) - 1.0 / hull;
    const double dAp = -inter / (uni * uni) + 1.0 / hull;
    const double dC = -uni / (hull * hull);
    // Partials with respect to the corner coordinates.
    double gx1 = 0, gx2 = 0, gy1 = 0, gy2 = 0;
    if (iw_raw > 0.0 && ih_raw > 0.0) {
      const double diw = dI * ih, dih = dI * iw;
      if (x2 < tx2) gx2 += diw;
      if (x1 > tx1) gx1 -= diw;
      if (y2 < ty2) gy2 += dih;
      if (y1 > ty1) gy1 -= dih;
    }
    gx2 += dAp * (y2 - y1);
    gx1 -= dAp * (y2 - y1);
    gy2 += dAp * (x2 - x1);
    gy1 -= dAp * (x2 - x1);
    const double dcw = dC * ch, dch = dC * cw;
    if (x2 > tx2) gx2 += dcw;
    if (x1 < tx1) gx1 -= dcw;
    if (y2 > ty2) gy2 += dch;
    if (y1 < ty1) gy1 -= dch;
    dgiou[i] = {gx1 + gx2, gy1 + gy2, 0.5 * (gx2 - gx1), 0.5 * (gy2 - gy1)};
  }
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(total));
  detail::record<T>("giou_loss_sum", {&pred}, y, [pi = pred.impl(), dgiou = std::move(dgiou)](std::span<const T> g) {
    T* gp = detail::grad_of(pi);
    if (!gp) return;
    for (std::size_t i = 0; i < dgiou.size(); ++i)
      for (std::size_t k = 0; k < 4; ++k) gp[4 * i + k] -= g[0] * static_cast<T>(dgiou[i][k]);
  });
  return y;
}

}  // namespace sdetr
