#pragma once

#include <cmath>
#include <random>
#include <string>

#include "sparse_detr/checkpoint.hpp"
#include "sparse_detr/ops.hpp"

namespace sdetr {

using Rng = std::mt19937_64;

/// Mixes several integers into one well-spread 64-bit seed (splitmix64 finaliser).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  auto step = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  return step(step(step(a) ^ b) ^ c);
}

template <typename T>
Tensor<T> uniform_param(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> constant_param(Shape shape, double value) {
  auto n = shape_numel(shape);
  return Tensor<T>(std::move(shape), std::vector<T>(n, static_cast<T>(value)), true);
}

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  static Linear xavier(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0) {
    const double bound = gain * std::sqrt(6.0 / static_cast<double>(in + out));
    return {uniform_param<T>({in, out}, bound, rng), constant_param<T>({out}, 0.0)};
  }
  static Linear zeros(std::size_t in, std::size_t out, double bias = 0.0) {
    return {constant_param<T>({in, out}, 0.0), constant_param<T>({out}, bias)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  static LayerNorm init(std::size_t d) { return {constant_param<T>({d}, 1.0), constant_param<T>({d}, 0.0)}; }
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

}  // namespace sdetr
