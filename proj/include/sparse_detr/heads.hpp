#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "sparse_detr/boxes.hpp"
#include "sparse_detr/layers.hpp"

namespace sdetr {

/// M predictions: class logits [M, C] and normalised boxes [M, 4] (cxcywh).
template <typename T>
struct DetectionSet {
  Tensor<T> logits;
  Tensor<T> boxes;

  std::size_t size() const { return logits.defined() ? logits.dim(0) : 0; }
  std::size_t num_classes() const { return logits.dim(1); }

  /// Max class probability per prediction.
  std::vector<double> max_scores() const {
    std::vector<double> out(size());
    const std::size_t c = num_classes();
    for (std::size_t i = 0; i < out.size(); ++i) {
      double best = 0.0;
      for (std::size_t k = 0; k < c; ++k) best = std::max(best, static_cast<double>(sigmoid_value(logits[i * c + k])));
      out[i] = best;
    }
    return out;
  }
};

/// Class head plus three-layer box MLP. Boxes are predicted as
/// sigmoid(delta + logit(anchor)) so an untrained head reproduces its anchors.
template <typename T>
struct DetectionHead {
  Linear<T> cls;
  Linear<T> box1;
  Linear<T> box2;
  Linear<T> box3;

  static DetectionHead init(std::size_t d, std::size_t classes, Rng& rng) {
    constexpr double prior = 0.01;
    DetectionHead h{Linear<T>::xavier(d, classes, rng), Linear<T>::xavier(d, d, rng), Linear<T>::xavier(d, d, rng),
                    Linear<T>::zeros(d, 4)};
    for (auto& b : h.cls.bias.mutable_data()) b = static_cast<T>(-std::log((1.0 - prior) / prior));
    return h;
  }

  DetectionSet<T> operator()(const Tensor<T>& x, std::span<const BoxCxCyWH> anchors) const {
    if (anchors.size() != x.dim(0)) throw DimensionError("detection head: one anchor per row required");
    std::vector<T> inv(anchors.size() * 4);
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      inv[4 * i] = inverse_sigmoid_value(static_cast<T>(anchors[i].cx));
      inv[4 * i + 1] = inverse_sigmoid_value(static_cast<T>(anchors[i].cy));
      inv[4 * i + 2] = inverse_sigmoid_value(static_cast<T>(anchors[i].w));
      inv[4 * i + 3] = inverse_sigmoid_value(static_cast<T>(anchors[i].h));
    }
    Tensor<T> delta = box3(relu(box2(relu(box1(x)))));
    Tensor<T> anchor_logits({anchors.size(), 4}, std::move(inv));
    return {cls(x), sigmoid(add(delta, anchor_logits))};
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    cls.collect(prefix + ".cls", out);
    box1.collect(prefix + ".box1", out);
    box2.collect(prefix + ".box2", out);
    box3.collect(prefix + ".box3", out);
  }
};

}  // namespace sdetr
