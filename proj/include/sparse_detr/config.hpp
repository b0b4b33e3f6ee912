#pragma once

// Run configuration and its flat `key = value` file format. Lines starting
// with '#' are comments; unknown keys and malformed values are errors.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "sparse_detr/data.hpp"
#include "sparse_detr/model.hpp"

namespace sdetr {

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double grad_clip = 0.1;  // global gradient-norm bound; 0 disables
  std::size_t epochs = 20;
  std::size_t decay_epoch = 16;  // learning rate drops tenfold from this epoch on (0-based)
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::size_t train_scenes = 2000;
  std::size_t eval_scenes = 500;
  std::size_t eval_every = 0;  // evaluate AP every n epochs; 0 = final epoch only

  void validate() const {
    require(lr > 0.0, "lr must be > 0");
    require(weight_decay >= 0.0, "weight_decay must be >= 0");
    require(grad_clip >= 0.0, "grad_clip must be >= 0");
    require(epochs >= 1, "epochs must be >= 1");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(train_scenes >= 1, "train_scenes must be >= 1");
  }
};

struct RunConfig {
  ModelConfig model;
  SceneConfig scene;
  TrainConfig train;
  std::string out_dir = "out";

  void validate() const {
    model.validate();
    scene.validate();
    train.validate();
    require(scene.image_size == model.image_size, "scene image size must equal model image_size");
    require(model.num_classes == kNumShapeClasses, "num_classes must be 3 for the synthetic shapes");
  }
};

namespace detail {

template <typename N>
N parse_number(std::string_view key, std::string_view v) {
  N out{};
  if constexpr (std::is_floating_point_v<N>) {
    try {
      std::size_t used = 0;
      const std::string s(v);
      out = static_cast<N>(std::stod(s, &used));
      if (used != s.size()) throw std::invalid_argument("trailing");
      return out;
    } catch (const std::logic_error&) {
      throw ContractError("config key '" + std::string(key) + "': invalid number '" + std::string(v) + "'");
    }
  } else {
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
      throw ContractError("config key '" + std::string(key) + "': invalid integer '" + std::string(v) + "'");
    return out;
  }
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ContractError("config key '" + std::string(key) + "': expected true or false, got '" + std::string(v) + "'");
}

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Applies one `key = value` setting.
inline void apply_setting(RunConfig& c, std::string_view key, std::string_view v) {
  using detail::parse_bool;
  using detail::parse_number;
  using Setter = std::function<void(std::string_view)>;
  const std::map<std::string_view, Setter> table = {
      {"rho", [&](auto s) { c.model.rho = parse_number<double>(key, s); }},
      {"criterion", [&](auto s) { c.model.criterion = parse_criterion(s); }},
      {"encoder_layers", [&](auto s) { c.model.encoder_layers = parse_number<std::size_t>(key, s); }},
      {"decoder_layers", [&](auto s) { c.model.decoder_layers = parse_number<std::size_t>(key, s); }},
      {"d_model", [&](auto s) { c.model.d_model = parse_number<std::size_t>(key, s); }},
      {"heads", [&](auto s) { c.model.heads = parse_number<std::size_t>(key, s); }},
      {"levels", [&](auto s) { c.model.levels = parse_number<std::size_t>(key, s); }},
      {"points", [&](auto s) { c.model.points = parse_number<std::size_t>(key, s); }},
      {"ffn_dim", [&](auto s) { c.model.ffn_dim = parse_number<std::size_t>(key, s); }},
      {"num_queries", [&](auto s) { c.model.num_queries = parse_number<std::size_t>(key, s); }},
      {"num_classes", [&](auto s) { c.model.num_classes = parse_number<std::size_t>(key, s); }},
      {"topk_queries", [&](auto s) { c.model.topk_queries = parse_number<std::size_t>(key, s); }},
      {"use_bbox_refine", [&](auto s) { c.model.use_bbox_refine = parse_bool(key, s); }},
      {"use_encoder_aux", [&](auto s) { c.model.use_encoder_aux = parse_bool(key, s); }},
      {"norm_placement", [&](auto s) { c.model.norm_placement = parse_norm_placement(s); }},
      {"saliency_loss", [&](auto s) { c.model.saliency_loss = parse_saliency_loss(s); }},
      {"dam_loss_weight", [&](auto s) { c.model.dam_loss_weight = parse_number<double>(key, s); }},
      {"image_size",
       [&](auto s) { c.model.image_size = c.scene.image_size = parse_number<std::size_t>(key, s); }},
      {"scene_min_objects", [&](auto s) { c.scene.min_objects = parse_number<std::size_t>(key, s); }},
      {"scene_max_objects", [&](auto s) { c.scene.max_objects = parse_number<std::size_t>(key, s); }},
      {"scene_min_size", [&](auto s) { c.scene.min_size = parse_number<double>(key, s); }},
      {"scene_max_size", [&](auto s) { c.scene.max_size = parse_number<double>(key, s); }},
      {"scene_noise", [&](auto s) { c.scene.noise = parse_number<double>(key, s); }},
      {"data_seed", [&](auto s) { c.scene.seed = parse_number<std::uint64_t>(key, s); }},
      {"lr", [&](auto s) { c.train.lr = parse_number<double>(key, s); }},
      {"weight_decay", [&](auto s) { c.train.weight_decay = parse_number<double>(key, s); }},
      {"grad_clip", [&](auto s) { c.train.grad_clip = parse_number<double>(key, s); }},
      {"epochs", [&](auto s) { c.train.epochs = parse_number<std::size_t>(key, s); }},
      {"decay_epoch", [&](auto s) { c.train.decay_epoch = parse_number<std::size_t>(key, s); }},
      {"batch_size", [&](auto s) { c.train.batch_size = parse_number<std::size_t>(key, s); }},
      {"seed", [&](auto s) { c.train.seed = parse_number<std::uint64_t>(key, s); }},
      {"train_scenes", [&](auto s) { c.train.train_scenes = parse_number<std::size_t>(key, s); }},
      {"eval_scenes", [&](auto s) { c.train.eval_scenes = parse_number<std::size_t>(key, s); }},
      {"eval_every", [&](auto s) { c.train.eval_every = parse_number<std::size_t>(key, s); }},
      {"out_dir", [&](auto s) { c.out_dir = std::string(s); }},
  };
  auto it = table.find(key);
  if (it == table.end()) throw ContractError("unknown config key '" + std::string(key) + "'");
  it->second(v);
}

inline RunConfig parse_config(std::string_view text) {
  RunConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto s = detail::trim(line);
    if (s.empty() || s.front() == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos)
      throw ContractError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    apply_setting(c, detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline std::string format_config(const RunConfig& c) {
  std::ostringstream o;
  auto b = [](bool v) { return v ? "true" : "false"; };
  // shortest text that parses back to the same double
  auto d = [](double v) {
    char buf[32];
    return std::string(buf, std::to_chars(buf, buf + sizeof buf, v).ptr);
  };
  o << "rho = " << d(c.model.rho) << "\ncriterion = " << to_string(c.model.criterion)
    << "\nencoder_layers = " << c.model.encoder_layers << "\ndecoder_layers = " << c.model.decoder_layers
    << "\nd_model = " << c.model.d_model << "\nheads = " << c.model.heads << "\nlevels = " << c.model.levels
    << "\npoints = " << c.model.points << "\nffn_dim = " << c.model.ffn_dim << "\nnum_queries = " << c.model.num_queries
    << "\nnum_classes = " << c.model.num_classes << "\ntopk_queries = " << c.model.topk_queries
    << "\nuse_bbox_refine = " << b(c.model.use_bbox_refine) << "\nuse_encoder_aux = " << b(c.model.use_encoder_aux)
    << "\nnorm_placement = " << to_string(c.model.norm_placement)
    << "\nsaliency_loss = " << to_string(c.model.saliency_loss) << "\ndam_loss_weight = " << d(c.model.dam_loss_weight)
    << "\nimage_size = " << c.model.image_size << "\nscene_min_objects = " << c.scene.min_objects
    << "\nscene_max_objects = " << c.scene.max_objects << "\nscene_min_size = " << d(c.scene.min_size)
    << "\nscene_max_size = " << d(c.scene.max_size) << "\nscene_noise = " << d(c.scene.noise)
    << "\ndata_seed = " << c.scene.seed << "\nlr = " << d(c.train.lr) << "\nweight_decay = " << d(c.train.weight_decay)
    << "\ngrad_clip = " << d(c.train.grad_clip) << "\nepochs = " << c.train.epochs
    << "\ndecay_epoch = " << c.train.decay_epoch << "\nbatch_size = " << c.train.batch_size
    << "\nseed = " << c.train.seed << "\ntrain_scenes = " << c.train.train_scenes
    << "\neval_scenes = " << c.train.eval_scenes << "\neval_every = " << c.train.eval_every
    << "\nout_dir = " << c.out_dir << "\n";
  return o.str();
}

}  // namespace sdetr
