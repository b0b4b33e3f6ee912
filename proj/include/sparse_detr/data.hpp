#pragma once

// Synthetic shape-detection scenes and the SDDS1 dataset file format:
//   "SDDS1", u32 count, then per scene
//   u32 H, u32 W, f32 pixels[3*H*W] (CHW), u32 objects, per object f32 cx, cy, w, h, u32 label.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "sparse_detr/binary_io.hpp"
#include "sparse_detr/layers.hpp"
#include "sparse_detr/matching.hpp"

namespace sdetr {

enum class ShapeClass : std::uint32_t { circle = 0, square = 1, triangle = 2 };
inline constexpr std::size_t kNumShapeClasses = 3;

struct SceneConfig {
  std::size_t image_size = 64;
  std::size_t min_objects = 1;
  std::size_t max_objects = 4;
  double min_size = 0.18;  // object extent as a fraction of the image side
  double max_size = 0.40;
  double noise = 0.03;     // std-dev of additive Gaussian pixel noise
  std::uint64_t seed = 0;

  void validate() const {
    require(image_size >= 8, "scene image_size must be >= 8");
    require(min_objects <= max_objects, "scene min_objects must be <= max_objects");
    require(min_size > 0.0 && min_size <= max_size && max_size <= 1.0, "scene size range must satisfy 0 < min <= max <= 1");
    require(min_size * static_cast<double>(image_size) >= 2.0, "scene objects must be at least 2 pixels wide");
    require(noise >= 0.0, "scene noise must be >= 0");
  }
};

struct Scene {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;  // [3, H, W] in [0, 1]
  Targets targets;

  template <typename T>
  Tensor<T> image() const {
    return Tensor<T>({3, height, width}, std::vector<T>(pixels.begin(), pixels.end()));
  }

  bool operator==(const Scene& o) const {
    if (height != o.height || width != o.width || targets.size() != o.targets.size()) return false;
    if (!std::equal(pixels.begin(), pixels.end(), o.pixels.begin(), o.pixels.end(),
                    [](float a, float b) { return std::bit_cast<std::uint32_t>(a) == std::bit_cast<std::uint32_t>(b); }))
      return false;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const auto &a = targets.boxes[i], &b = o.targets.boxes[i];
      if (a.cx != b.cx || a.cy != b.cy || a.w != b.w || a.h != b.h || targets.labels[i] != o.targets.labels[i])
        return false;
    }
    return true;
  }
};

namespace detail {

// Signed distance (pixels) from p to each shape; negative inside.
inline double sd_circle(double px, double py, double cx, double cy, double r) { return std::hypot(px - cx, py - cy) - r; }

inline double sd_square(double px, double py, double cx, double cy, double half) {
  const double dx = std::abs(px - cx) - half, dy = std::abs(py - cy) - half;
  return std::hypot(std::max(dx, 0.0), std::max(dy, 0.0)) + std::min(std::max(dx, dy), 0.0);
}

inline double sd_polygon(double px, double py, const std::array<std::array<double, 2>, 3>& v) {
  double d = std::numeric_limits<double>::infinity();
  bool inside = false;
  for (std::size_t i = 0, j = 2; i < 3; j = i++) {
    const double ex = v[j][0] - v[i][0], ey = v[j][1] - v[i][1];
    const double wx = px - v[i][0], wy = py - v[i][1];
    const double t = std::clamp((wx * ex + wy * ey) / (ex * ex + ey * ey), 0.0, 1.0);
    d = std::min(d, std::hypot(wx - ex * t, wy - ey * t));
    if ((v[i][1] > py) != (v[j][1] > py) && px < (v[j][0] - v[i][0]) * (py - v[i][1]) / (v[j][1] - v[i][1]) + v[i][0])
      inside = !inside;
  }
  return inside ? -d : d;
}

}  // namespace detail

/// Box coordinates are stored as 32-bit floats; boxes are rounded to that
/// precision so that export followed by import is the identity.
inline BoxCxCyWH round_to_storage(const BoxCxCyWH& b) {
  return {static_cast<float>(b.cx), static_cast<float>(b.cy), static_cast<float>(b.w), static_cast<float>(b.h)};
}

/// Deterministic in (cfg.seed, index). Shapes are drawn back to front with
/// edge coverage clamp(0.5 - signed distance, 0, 1); boxes are the exact
/// geometric extents of the drawn shapes.
inline Scene generate_scene(const SceneConfig& cfg, std::uint64_t index) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, index, 0x5CE7E));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n = cfg.image_size;
  const double side = static_cast<double>(n);
  Scene s;
  s.height = s.width = n;
  s.pixels.assign(3 * n * n, 0.0f);
  std::array<double, 3> bg;
  for (auto& c : bg) c = 0.05 + 0.25 * unit(rng);
  std::vector<double> img(3 * n * n);
  for (std::size_t c = 0; c < 3; ++c) std::fill_n(img.begin() + c * n * n, n * n, bg[c]);

  std::uniform_int_distribution<std::size_t> count_dist(cfg.min_objects, cfg.max_objects);
  std::uniform_int_distribution<std::uint32_t> class_dist(0, kNumShapeClasses - 1);
  const std::size_t count = count_dist(rng);
  for (std::size_t o = 0; o < count; ++o) {
    const auto label = class_dist(rng);
    const double extent = (cfg.min_size + (cfg.max_size - cfg.min_size) * unit(rng)) * side;
    std::array<double, 3> color;
    for (auto& c : color) c = 0.55 + 0.45 * unit(rng);
    // Place the shape, preferring spots that do not hide earlier objects.
    double cx = 0, cy = 0;
    for (int attempt = 0; attempt < 64; ++attempt) {
      cx = extent / 2 + (side - extent) * unit(rng);
      cy = extent / 2 + (side - extent) * unit(rng);
      const BoxCxCyWH cand{cx / side, cy / side, extent / side, extent / side};
      bool ok = true;
      for (const auto& b : s.targets.boxes) ok = ok && box_iou(cand, b) < 0.2;
      if (ok) break;
    }
    std::array<std::array<double, 2>, 3> tri{};
    if (label == static_cast<std::uint32_t>(ShapeClass::triangle)) {
      // Upward isosceles triangle filling the extent x extent square.
      tri = {{{cx, cy - extent / 2}, {cx - extent / 2, cy + extent / 2}, {cx + extent / 2, cy + extent / 2}}};
    }
    const BoxCxCyWH box{cx / side, cy / side, extent / side, extent / side};
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        double sd = 0.0;
        switch (static_cast<ShapeClass>(label)) {
          case ShapeClass::circle: sd = detail::sd_circle(px, py, cx, cy, extent / 2); break;
          case ShapeClass::square: sd = detail::sd_square(px, py, cx, cy, extent / 2); break;
          case ShapeClass::triangle: sd = detail::sd_polygon(px, py, tri); break;
        }
        const double a = std::clamp(0.5 - sd, 0.0, 1.0);
        if (a <= 0.0) continue;
        for (std::size_t c = 0; c < 3; ++c) {
          double& v = img[c * n * n + y * n + x];
          v = (1.0 - a) * v + a * color[c];
        }
      }
    }
    s.targets.boxes.push_back(round_to_storage(box));
    s.targets.labels.push_back(label);
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = cfg.noise > 0.0 ? img[i] + cfg.noise * noise(rng) : img[i];
    s.pixels[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return s;
}

inline std::vector<Scene> generate_scenes(const SceneConfig& cfg, std::uint64_t first, std::size_t n) {
  std::vector<Scene> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_scene(cfg, first + i));
  return out;
}

inline constexpr std::string_view kDatasetMagic = "SDDS1";

inline io::ByteWriter encode_dataset(const std::vector<Scene>& scenes) {
  io::ByteWriter w;
  w.bytes(kDatasetMagic);
  w.u32(static_cast<std::uint32_t>(scenes.size()));
  for (const auto& s : scenes) {
    w.u32(static_cast<std::uint32_t>(s.height));
    w.u32(static_cast<std::uint32_t>(s.width));
    for (float v : s.pixels) w.f32(v);
    w.u32(static_cast<std::uint32_t>(s.targets.size()));
    for (std::size_t i = 0; i < s.targets.size(); ++i) {
      const auto& b = s.targets.boxes[i];
      w.f32(static_cast<float>(b.cx));
      w.f32(static_cast<float>(b.cy));
      w.f32(static_cast<float>(b.w));
      w.f32(static_cast<float>(b.h));
      w.u32(s.targets.labels[i]);
    }
  }
  return w;
}

inline void export_dataset(const std::vector<Scene>& scenes, const std::string& path) {
  encode_dataset(scenes).write_file(path);
}

inline void export_dataset(const SceneConfig& cfg, std::size_t n, const std::string& path) {
  export_dataset(generate_scenes(cfg, 0, n), path);
}

inline std::vector<Scene> decode_dataset(io::ByteReader& r) {
  r.expect_magic(kDatasetMagic);
  const std::uint32_t count = r.u32("scene count");
  std::vector<Scene> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    Scene s;
    const std::size_t at = r.offset();
    s.height = r.u32("scene height");
    s.width = r.u32("scene width");
    if (s.height == 0 || s.width == 0 || s.height > 4096 || s.width > 4096)
      throw FormatError("scene " + std::to_string(k) + " has implausible size " + std::to_string(s.height) + "x" +
                            std::to_string(s.width),
                        at);
    const std::size_t npix = 3 * s.height * s.width;
    r.need(4 * npix, "scene pixels");
    s.pixels.resize(npix);
    for (auto& v : s.pixels) v = r.f32("scene pixels");
    const std::uint32_t objects = r.u32("object count");
    r.need(20ull * objects, "object records");
    for (std::uint32_t o = 0; o < objects; ++o) {
      BoxCxCyWH b;
      b.cx = r.f32("box");
      b.cy = r.f32("box");
      b.w = r.f32("box");
      b.h = r.f32("box");
      s.targets.boxes.push_back(b);
      s.targets.labels.push_back(r.u32("label"));
    }
    out.push_back(std::move(s));
  }
  if (!r.at_end())
    throw FormatError("trailing bytes after " + std::to_string(count) + " scenes: expected file length " +
                          std::to_string(r.offset()) + " bytes, actual length " + std::to_string(r.size()),
                      r.offset());
  return out;
}

inline std::vector<Scene> import_dataset(const std::string& path) {
  auto r = io::ByteReader::from_file(path);
  return decode_dataset(r);
}

/// Parses "seed:n" into a scene range.
struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t count = 0;
};

inline SyntheticSpec parse_synthetic_spec(std::string_view s) {
  const auto colon = s.find(':');
  if (colon == std::string_view::npos) throw ContractError("--synthetic expects <seed>:<n>, got '" + std::string(s) + "'");
  try {
    std::size_t used = 0;
    const std::string a(s.substr(0, colon)), b(s.substr(colon + 1));
    SyntheticSpec out{std::stoull(a, &used), 0};
    if (used != a.size()) throw std::invalid_argument("seed");
    out.count = std::stoull(b, &used);
    if (used != b.size()) throw std::invalid_argument("count");
    return out;
  } catch (const std::logic_error&) {
    throw ContractError("--synthetic expects <seed>:<n>, got '" + std::string(s) + "'");
  }
}

}  // namespace sdetr
