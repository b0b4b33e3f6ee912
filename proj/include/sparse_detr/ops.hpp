#pragma once

// Differentiable primitives. Each function computes its forward value eagerly
// and, when a tape is active and an input requires a gradient, registers the
// matching backward rule. Broadcasting is limited to trailing-bias addition.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "sparse_detr/tensor.hpp"

namespace sdetr {

namespace detail {

// Fixed 8-lane summation order. An `omp simd reduction` would let alignment peeling,
// and with it the heap address, change the rounding.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T lane[8] = {};
  std::size_t k = 0;
  for (; k + 8 <= n; k += 8) {
#pragma omp simd
    for (std::size_t j = 0; j < 8; ++j) lane[j] += a[k + j] * b[k + j];
  }
  for (std::size_t j = 0; k < n; ++k, ++j) lane[j] += a[k] * b[k];
  return ((lane[0] + lane[4]) + (lane[1] + lane[5])) + ((lane[2] + lane[6]) + (lane[3] + lane[7]));
}

// C[r, c] += sum_k A[r, k] * B[k, c]
template <typename T>
void gemm_nn(std::size_t rows, std::size_t inner, std::size_t cols, const T* A, const T* B, T* C) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* c = C + r * cols;
    const T* a = A + r * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const T av = a[k];
      const T* b = B + k * cols;
#pragma omp simd
      for (std::size_t j = 0; j < cols; ++j) c[j] += av * b[j];
    }
  }
}

// C[r, c] += sum_k A[r, k] * B[c, k]
template <typename T>
void gemm_nt(std::size_t rows, std::size_t inner, std::size_t cols, const T* A, const T* B, T* C) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* a = A + r * inner;
    for (std::size_t c = 0; c < cols; ++c) {
      const T* b = B + c * inner;
      C[r * cols + c] += dot(a, b, inner);
    }
  }
}

// C[k, c] += sum_r A[r, k] * B[r, c]
template <typename T>
void gemm_tn(std::size_t rows, std::size_t inner, std::size_t cols, const T* A, const T* B, T* C) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* a = A + r * inner;
    const T* b = B + r * cols;
    for (std::size_t k = 0; k < inner; ++k) {
      const T av = a[k];
      T* c = C + k * cols;
#pragma omp simd
      for (std::size_t j = 0; j < cols; ++j) c[j] += av * b[j];
    }
  }
}

inline void check_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " differ");
}

inline void check_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
}

template <typename T, typename F, typename DF>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, DF df) {
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  Tensor<T> y(x.shape(), std::move(out));
  record<T>(op, {&x}, y, [xi = x.impl(), yi = y.impl(), df](std::span<const T> g) {
    T* gx = grad_of(xi);
    if (!gx) return;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xi->data[i], yi->data[i]);
  });
  return y;
}

}  // namespace detail

/// y = x W + b over the trailing axis of x.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b = {}) {
  detail::check_rank("linear weight", W.shape(), 2);
  if (x.rank() < 1) throw DimensionError("linear: input must have rank >= 1");
  const std::size_t din = W.dim(0), dout = W.dim(1);
  if (x.shape().back() != din) {
    throw DimensionError("linear: input axis " + std::to_string(x.rank() - 1) + " has size " +
                         std::to_string(x.shape().back()) + " but weight axis 0 has size " + std::to_string(din));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != dout)) {
    throw DimensionError("linear: bias shape " + shape_str(b.shape()) + " does not match weight axis 1 of size " +
                         std::to_string(dout));
  }
  const std::size_t rows = x.numel() / din;
  std::vector<T> out(rows * dout, T(0));
  if (b.defined()) {
    for (std::size_t r = 0; r < rows; ++r) std::copy(b.data().begin(), b.data().end(), out.begin() + r * dout);
  }
  detail::gemm_nn(rows, din, dout, x.data().data(), W.data().data(), out.data());
  if (auto* c = active_counter()) c->linear_macs += rows * din * dout;
  Shape shape = x.shape();
  shape.back() = dout;
  Tensor<T> y(std::move(shape), std::move(out));
  detail::record<T>("linear", {&x, &W, &b}, y,
                    [xi = x.impl(), wi = W.impl(), bi = b.impl(), rows, din, dout](std::span<const T> g) {
                      if (T* gx = detail::grad_of(xi)) detail::gemm_nt(rows, dout, din, g.data(), wi->data.data(), gx);
                      if (T* gw = detail::grad_of(wi)) detail::gemm_tn(rows, din, dout, xi->data.data(), g.data(), gw);
                      if (T* gb = detail::grad_of(bi)) {
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t j = 0; j < dout; ++j) gb[j] += g[r * dout + j];
                      }
                    });
  return y;
}

/// [n,k] x [k,m] -> [n,m]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_rank("matmul lhs", a.shape(), 2);
  detail::check_rank("matmul rhs", b.shape(), 2);
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: lhs axis 1 (" + std::to_string(k) + ") != rhs axis 0 (" + std::to_string(b.dim(0)) + ")");
  std::vector<T> out(n * m, T(0));
  detail::gemm_nn(n, k, m, a.data().data(), b.data().data(), out.data());
  Tensor<T> y({n, m}, std::move(out));
  detail::record<T>("matmul", {&a, &b}, y, [ai = a.impl(), bi = b.impl(), n, k, m](std::span<const T> g) {
    if (T* ga = detail::grad_of(ai)) detail::gemm_nt(n, m, k, g.data(), bi->data.data(), ga);
    if (T* gb = detail::grad_of(bi)) detail::gemm_tn(n, k, m, ai->data.data(), g.data(), gb);
  });
  return y;
}

/// [n,k] x [m,k]^T -> [n,m]
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_rank("matmul_nt lhs", a.shape(), 2);
  detail::check_rank("matmul_nt rhs", b.shape(), 2);
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
  if (b.dim(1) != k)
    throw DimensionError("matmul_nt: lhs axis 1 (" + std::to_string(k) + ") != rhs axis 1 (" + std::to_string(b.dim(1)) + ")");
  std::vector<T> out(n * m, T(0));
  detail::gemm_nt(n, k, m, a.data().data(), b.data().data(), out.data());
  Tensor<T> y({n, m}, std::move(out));
  detail::record<T>("matmul_nt", {&a, &b}, y, [ai = a.impl(), bi = b.impl(), n, k, m](std::span<const T> g) {
    if (T* ga = detail::grad_of(ai)) detail::gemm_nn(n, m, k, g.data(), bi->data.data(), ga);
    if (T* gb = detail::grad_of(bi)) detail::gemm_tn(n, m, k, g.data(), ai->data.data(), gb);
  });
  return y;
}

/// Elementwise sum. `b` may also be a rank-1 bias matching the trailing axis of `a`.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const bool bias = a.shape() != b.shape();
  if (bias && !(b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0))) {
    throw DimensionError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " are neither equal nor trailing-bias compatible");
  }
  const std::size_t inner = b.numel();
  std::vector<T> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % inner];
  Tensor<T> y(a.shape(), std::move(out));
  detail::record<T>("add", {&a, &b}, y, [ai = a.impl(), bi = b.impl(), inner](std::span<const T> g) {
    if (T* ga = detail::grad_of(ai))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (T* gb = detail::grad_of(bi))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i];
  });
  return y;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("sub", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tensor<T> y(a.shape(), std::move(out));
  detail::record<T>("sub", {&a, &b}, y, [ai = a.impl(), bi = b.impl()](std::span<const T> g) {
    if (T* ga = detail::grad_of(ai))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (T* gb = detail::grad_of(bi))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
  return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor<T> y(a.shape(), std::move(out));
  detail::record<T>("mul", {&a, &b}, y, [ai = a.impl(), bi = b.impl()](std::span<const T> g) {
    if (T* ga = detail::grad_of(ai))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
    if (T* gb = detail::grad_of(bi))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
  });
  return y;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary<T>("scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary<T>(
      "abs", x, [](T v) { return std::abs(v); }, [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
T sigmoid_value(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>("sigmoid", x, [](T v) { return sigmoid_value(v); }, [](T, T y) { return y * (T(1) - y); });
}

/// Exact erf form of the Gaussian-error linear unit.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  Tensor<T> y = Tensor<T>::scalar(acc);
  detail::record<T>("sum", {&x}, y, [xi = x.impl()](std::span<const T> g) {
    if (T* gx = detail::grad_of(xi))
      for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += g[0];
  });
  return y;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Normalises each row over the trailing axis, then applies gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() < 1 || x.shape().back() < 1) throw DimensionError("layer_norm: trailing axis must be non-empty");
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layer_norm: gamma/beta size does not match trailing axis " + std::to_string(d));
  const std::size_t rows = x.numel() / d;
  std::vector<T> xhat(x.numel()), inv_std(rows), out(x.numel());
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gamma[j] + beta[j];
    }
  }
  Tensor<T> y(x.shape(), std::move(out));
  detail::record<T>("layer_norm", {&x, &gamma, &beta}, y,
                    [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), xhat = std::move(xhat),
                     inv_std = std::move(inv_std), rows, d](std::span<const T> g) {
                      T* gx = detail::grad_of(xi);
                      T* gg = detail::grad_of(gi);
                      T* gb = detail::grad_of(bi);
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T* gr = g.data() + r * d;
                        const T* hr = xhat.data() + r * d;
                        if (gg)
                          for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * hr[j];
                        if (gb)
                          for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
                        if (!gx) continue;
                        T m1 = T(0), m2 = T(0);
                        for (std::size_t j = 0; j < d; ++j) {
                          const T dh = gr[j] * gi->data[j];
                          m1 += dh;
                          m2 += dh * hr[j];
                        }
                        m1 /= static_cast<T>(d);
                        m2 /= static_cast<T>(d);
                        for (std::size_t j = 0; j < d; ++j)
                          gx[r * d + j] += inv_std[r] * (gr[j] * gi->data[j] - m1 - hr[j] * m2);
                      }
                    });
  return y;
}

/// Max-stabilised softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ContractError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, xd[base + k * inner]);
      T z = T(0);
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(xd[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  Tensor<T> y(x.shape(), std::move(out));
  detail::record<T>("softmax", {&x}, y, [xi = x.impl(), yi = y.impl(), outer, inner, len](std::span<const T> g) {
    T* gx = detail::grad_of(xi);
    if (!gx) return;
    const auto& yd = yi->data;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = T(0);
        for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * yd[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) gx[base + k * inner] += yd[base + k * inner] * (g[base + k * inner] - dot);
      }
    }
  });
  return y;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<T> y(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  detail::record<T>("reshape", {&x}, y, [xi = x.impl()](std::span<const T> g) {
    if (T* gx = detail::grad_of(xi))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return y;
}

/// Rows `idx` of a rank-2 tensor, in the given order.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> idx) {
  detail::check_rank("gather_rows", x.shape(), 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<T> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) throw ContractError("gather_rows: index " + std::to_string(idx[i]) + " >= " + std::to_string(n));
    std::copy_n(x.data().begin() + idx[i] * d, d, out.begin() + i * d);
  }
  Tensor<T> y({idx.size(), d}, std::move(out));
  detail::record<T>("gather_rows", {&x}, y,
                    [xi = x.impl(), index = std::vector<std::size_t>(idx.begin(), idx.end()), d](std::span<const T> g) {
                      T* gx = detail::grad_of(xi);
                      if (!gx) return;
                      for (std::size_t i = 0; i < index.size(); ++i)
                        for (std::size_t j = 0; j < d; ++j) gx[index[i] * d + j] += g[i * d + j];
                    });
  return y;
}

/// Copy of `base` with rows `idx` replaced by the rows of `rows`. Indices must be distinct.
template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& base, std::span<const std::size_t> idx, const Tensor<T>& rows) {
  detail::check_rank("scatter_rows base", base.shape(), 2);
  detail::check_rank("scatter_rows rows", rows.shape(), 2);
  const std::size_t n = base.dim(0), d = base.dim(1);
  if (rows.dim(0) != idx.size() || rows.dim(1) != d)
    throw DimensionError("scatter_rows: rows shape " + shape_str(rows.shape()) + " does not match " +
                         std::to_string(idx.size()) + " indices of width " + std::to_string(d));
  std::vector<T> out(base.data().begin(), base.data().end());
  std::vector<std::uint8_t> replaced(n, 0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n || replaced[idx[i]]) throw ContractError("scatter_rows: invalid or repeated index");
    replaced[idx[i]] = 1;
    std::copy_n(rows.data().begin() + i * d, d, out.begin() + idx[i] * d);
  }
  Tensor<T> y(base.shape(), std::move(out));
  detail::record<T>("scatter_rows", {&base, &rows}, y,
                    [bi = base.impl(), ri = rows.impl(), index = std::vector<std::size_t>(idx.begin(), idx.end()),
                     replaced = std::move(replaced), n, d](std::span<const T> g) {
                      if (T* gb = detail::grad_of(bi)) {
                        for (std::size_t r = 0; r < n; ++r)
                          if (!replaced[r])
                            for (std::size_t j = 0; j < d; ++j) gb[r * d + j] += g[r * d + j];
                      }
                      if (T* gr = detail::grad_of(ri)) {
                        for (std::size_t i = 0; i < index.size(); ++i)
                          for (std::size_t j = 0; j < d; ++j) gr[i * d + j] += g[index[i] * d + j];
                      }
                    });
  return y;
}

/// Columns [begin, end) of a rank-2 tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  detail::check_rank("slice_cols", x.shape(), 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (begin > end || end > d) throw DimensionError("slice_cols: range out of bounds for " + shape_str(x.shape()));
  const std::size_t w = end - begin;
  std::vector<T> out(n * w);
  for (std::size_t r = 0; r < n; ++r) std::copy_n(x.data().begin() + r * d + begin, w, out.begin() + r * w);
  Tensor<T> y({n, w}, std::move(out));
  detail::record<T>("slice_cols", {&x}, y, [xi = x.impl(), n, d, w, begin](std::span<const T> g) {
    T* gx = detail::grad_of(xi);
    if (!gx) return;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < w; ++j) gx[r * d + begin + j] += g[r * w + j];
  });
  return y;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t n = parts[0].dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::check_rank("concat_cols", p.shape(), 2);
    if (p.dim(0) != n) throw DimensionError("concat_cols: row counts differ on axis 0");
    total += p.dim(1);
  }
  std::vector<T> out(n * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t r = 0; r < n; ++r) std::copy_n(p.data().begin() + r * w, w, out.begin() + r * total + off);
    off += w;
  }
  Tensor<T> y({n, total}, std::move(out));
  Tape<T>* tape = Tape<T>::active();
  bool track = false;
  for (const auto& p : parts) track = track || p.requires_grad();
  if (tape && track) {
    y.impl()->requires_grad = true;
    std::vector<std::shared_ptr<TensorImpl<T>>> impls;
    std::vector<std::uint64_t> ids;
    for (const auto& p : parts) {
      impls.push_back(p.impl());
      ids.push_back(p.id());
    }
    tape->push("concat_cols", std::move(ids), y.id(), [yi = y.impl(), impls = std::move(impls), n, total]() {
      if (yi->grad.empty()) return;
      std::size_t o = 0;
      for (const auto& pi : impls) {
        const std::size_t w = pi->shape[1];
        if (T* gp = detail::grad_of(pi))
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += yi->grad[r * total + o + j];
        o += w;
      }
    });
  }
  return y;
}

/// Stacks rank-2 tensors of equal width along axis 0.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t d = parts[0].dim(1);
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::check_rank("concat_rows", p.shape(), 2);
    if (p.dim(1) != d) throw DimensionError("concat_rows: widths differ on axis 1");
    total += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(total * d);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor<T> y({total, d}, std::move(out));
  Tape<T>* tape = Tape<T>::active();
  bool track = false;
  for (const auto& p : parts) track = track || p.requires_grad();
  if (tape && track) {
    y.impl()->requires_grad = true;
    std::vector<std::shared_ptr<TensorImpl<T>>> impls;
    std::vector<std::uint64_t> ids;
    for (const auto& p : parts) {
      impls.push_back(p.impl());
      ids.push_back(p.id());
    }
    tape->push("concat_rows", std::move(ids), y.id(), [yi = y.impl(), impls = std::move(impls)]() {
      if (yi->grad.empty()) return;
      std::size_t o = 0;
      for (const auto& pi : impls) {
        const std::size_t n = pi->data.size();
        if (T* gp = detail::grad_of(pi))
          for (std::size_t k = 0; k < n; ++k) gp[k] += yi->grad[o + k];
        o += n;
      }
    });
  }
  return y;
}

/// Tiles a [1, D] row n times.
template <typename T>
Tensor<T> repeat_rows(const Tensor<T>& x, std::size_t n) {
  detail::check_rank("repeat_rows", x.shape(), 2);
  if (x.dim(0) != 1) throw DimensionError("repeat_rows: expected a single row, got " + shape_str(x.shape()));
  const std::size_t d = x.dim(1);
  std::vector<T> out(n * d);
  for (std::size_t r = 0; r < n; ++r) std::copy_n(x.data().begin(), d, out.begin() + r * d);
  Tensor<T> y({n, d}, std::move(out));
  detail::record<T>("repeat_rows", {&x}, y, [xi = x.impl(), n, d](std::span<const T> g) {
    T* gx = detail::grad_of(xi);
    if (!gx) return;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) gx[j] += g[r * d + j];
  });
  return y;
}

/// Mean over rows whose `valid` flag is set; [N, D] -> [1, D]. Zero if no row is valid.
template <typename T>
Tensor<T> masked_mean_rows(const Tensor<T>& x, std::span<const std::uint8_t> valid) {
  detail::check_rank("masked_mean_rows", x.shape(), 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (valid.size() != n) throw DimensionError("masked_mean_rows: mask length differs from axis 0");
  std::size_t count = 0;
  for (auto v : valid) count += v ? 1 : 0;
  const T inv = count ? T(1) / static_cast<T>(count) : T(0);
  std::vector<T> out(d, T(0));
  for (std::size_t r = 0; r < n; ++r)
    if (valid[r])
      for (std::size_t j = 0; j < d; ++j) out[j] += x[r * d + j];
  for (auto& v : out) v *= inv;
  Tensor<T> y({1, d}, std::move(out));
  detail::record<T>("masked_mean_rows", {&x}, y,
                    [xi = x.impl(), mask = std::vector<std::uint8_t>(valid.begin(), valid.end()), n, d, inv](std::span<const T> g) {
                      T* gx = detail::grad_of(xi);
                      if (!gx) return;
                      for (std::size_t r = 0; r < n; ++r)
                        if (mask[r])
                          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[j] * inv;
                    });
  return y;
}

/// [C, H, W] -> [H*W, C], row-major over (y, x).
template <typename T>
Tensor<T> chw_to_tokens(const Tensor<T>& image) {
  detail::check_rank("chw_to_tokens", image.shape(), 3);
  const std::size_t c = image.dim(0), hw = image.dim(1) * image.dim(2);
  std::vector<T> out(hw * c);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) out[p * c + ch] = image[ch * hw + p];
  Tensor<T> y({hw, c}, std::move(out));
  detail::record<T>("chw_to_tokens", {&image}, y, [xi = image.impl(), c, hw](std::span<const T> g) {
    T* gx = detail::grad_of(xi);
    if (!gx) return;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) gx[ch * hw + p] += g[p * c + ch];
  });
  return y;
}

/// Groups non-overlapping p x p windows of an (h, w) token grid into single rows:
/// [h*w, C] -> [(h/p)*(w/p), p*p*C]. A linear layer on the result is a strided convolution.
template <typename T>
Tensor<T> grid_patchify(const Tensor<T>& x, std::size_t h, std::size_t w, std::size_t p) {
  detail::check_rank("grid_patchify", x.shape(), 2);
  if (x.dim(0) != h * w) throw DimensionError("grid_patchify: axis 0 is not h*w");
  if (p == 0 || h % p || w % p)
    throw ContractError("grid_patchify: grid " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by " +
                        std::to_string(p));
  const std::size_t c = x.dim(1), oh = h / p, ow = w / p, row = p * p * c;
  std::vector<std::size_t> src(oh * ow * row);
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j)
      for (std::size_t di = 0; di < p; ++di)
        for (std::size_t dj = 0; dj < p; ++dj)
          for (std::size_t ch = 0; ch < c; ++ch)
            src[(i * ow + j) * row + (di * p + dj) * c + ch] = ((i * p + di) * w + (j * p + dj)) * c + ch;
  std::vector<T> out(src.size());
  for (std::size_t k = 0; k < src.size(); ++k) out[k] = x[src[k]];
  Tensor<T> y({oh * ow, row}, std::move(out));
  detail::record<T>("grid_patchify", {&x}, y, [xi = x.impl(), src = std::move(src)](std::span<const T> g) {
    T* gx = detail::grad_of(xi);
    if (!gx) return;
    for (std::size_t k = 0; k < src.size(); ++k) gx[src[k]] += g[k];
  });
  return y;
}

template <typename T>
T inverse_sigmoid_value(T v, T eps = T(1e-5)) {
  v = std::clamp(v, T(0), T(1));
  return std::log(std::max(v, eps) / std::max(T(1) - v, eps));
}

}  // namespace sdetr
