#pragma once

// Artifact writers for the command-line driver.
//
// Mask and DAM dumps share a header: u32 number of levels, then (u32 h, u32 w)
// per level. The mask body is one u8 per token; the DAM body one f32 per token.

#include <fstream>
#include <string>
#include <vector>

#include "sparse_detr/train.hpp"

namespace sdetr {

namespace detail {

inline void write_level_header(io::ByteWriter& w, const TokenLayout& layout) {
  w.u32(static_cast<std::uint32_t>(layout.levels.size()));
  for (auto [h, wd] : layout.levels) {
    w.u32(static_cast<std::uint32_t>(h));
    w.u32(static_cast<std::uint32_t>(wd));
  }
}

}  // namespace detail

inline void write_mask_dump(const std::string& path, const TokenLayout& layout, const SelectionMask& mask) {
  io::ByteWriter w;
  detail::write_level_header(w, layout);
  for (auto b : mask.selected) w.u8(b);
  w.write_file(path);
}

inline void write_dam_dump(const std::string& path, const TokenLayout& layout, const DamMap& dam) {
  io::ByteWriter w;
  detail::write_level_header(w, layout);
  for (double v : dam.values) w.f32(static_cast<float>(v));
  w.write_file(path);
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw IoError("write to '" + path + "' failed");
}

inline std::string flops_csv(const FlopReport& r, double rho) {
  using detail::fmt_double;
  std::string s = "rho,tokens,valid_tokens,selected,dense_pairs_per_layer,deformable_slots_per_layer,"
                  "sparse_slots_per_layer,encoder_dense_pairs,encoder_deformable_slots,encoder_sparse_slots,"
                  "decoder_cross_slots,decoder_self_pairs,encoder_linear_macs\n";
  s += csv_line({fmt_double(rho), std::to_string(r.tokens), std::to_string(r.valid_tokens), std::to_string(r.selected),
                 std::to_string(r.dense_pairs_per_layer), std::to_string(r.deformable_slots_per_layer),
                 std::to_string(r.sparse_slots_per_layer), std::to_string(r.encoder_dense_pairs),
                 std::to_string(r.encoder_deformable_slots), std::to_string(r.encoder_sparse_slots),
                 std::to_string(r.decoder_cross_slots), std::to_string(r.decoder_self_pairs),
                 std::to_string(r.encoder_linear_macs)});
  return s;
}

/// Long-format evaluation report: one row per (run, inference rho, metric).
inline std::string eval_csv_header() { return "criterion,rho_train,seed,rho_infer,metric,value\n"; }

inline std::string eval_csv_rows(const RunConfig& c, const EvalResult& r) {
  using detail::fmt_double;
  const std::string prefix = std::string(to_string(c.model.criterion)) + "," + fmt_double(c.model.rho) + "," +
                             std::to_string(c.train.seed) + "," + fmt_double(r.rho_infer) + ",";
  std::string s;
  auto row = [&](const char* metric, const std::string& v) { s += prefix + metric + "," + v + "\n"; };
  row("ap", fmt_double(r.ap.ap_mean));
  row("ap50", fmt_double(r.ap.ap50));
  row("ap75", fmt_double(r.ap.ap75));
  row("corr", fmt_double(r.corr));
  row("dam_nonzero_ratio", fmt_double(r.dam_nonzero_ratio));
  row("encoder_sparse_slots", std::to_string(r.flops.encoder_sparse_slots));
  row("encoder_deformable_slots", std::to_string(r.flops.encoder_deformable_slots));
  row("encoder_dense_pairs", std::to_string(r.flops.encoder_dense_pairs));
  return s;
}

/// One row per (criterion, rho, seed) sweep cell.
inline std::string sweep_csv_header() {
  return "criterion,rho,seed,ap,ap50,ap75,corr,dam_nonzero_ratio,encoder_sparse_slots,encoder_deformable_slots,"
         "encoder_dense_pairs\n";
}

inline std::string sweep_csv_row(const RunConfig& c, const EvalResult& r) {
  using detail::fmt_double;
  return csv_line({std::string(to_string(c.model.criterion)), fmt_double(c.model.rho), std::to_string(c.train.seed),
                   fmt_double(r.ap.ap_mean), fmt_double(r.ap.ap50), fmt_double(r.ap.ap75), fmt_double(r.corr),
                   fmt_double(r.dam_nonzero_ratio), std::to_string(r.flops.encoder_sparse_slots),
                   std::to_string(r.flops.encoder_deformable_slots), std::to_string(r.flops.encoder_dense_pairs)});
}

/// Per-layer gradient norms averaged over `batches` fixed batches of the
/// given scenes, starting from the same weights each time.
template <typename T>
std::vector<std::pair<std::string, double>> averaged_grad_norms(const ModelParams<T>& params, const ModelConfig& cfg,
                                                               const std::vector<Scene>& scenes, std::size_t batch_size,
                                                               std::size_t batches, std::uint64_t seed) {
  require(batch_size >= 1 && batches >= 1, "averaged_grad_norms: batch size and batch count must be >= 1");
  require(scenes.size() >= batch_size * batches, "averaged_grad_norms: not enough scenes for the requested batches");
  auto all = param_list(params);
  std::vector<std::pair<std::string, double>> acc;
  for (std::size_t b = 0; b < batches; ++b) {
    for (auto& p : all) p.zero_grad();
    for (std::size_t i = b * batch_size; i < (b + 1) * batch_size; ++i) {
      Tape<T> tape;
      TapeScope<T> scope(tape);
      auto out = model_forward(scenes[i].image<T>(), params, cfg, {cfg.rho, mix_seed(seed, i, 0x6A)});
      tape.backward(total_loss(out, scenes[i].targets, cfg).total);
    }
    auto norms = layerwise_grad_norm(params.layer_groups());
    if (acc.empty()) acc.assign(norms.size(), {"", 0.0});
    for (std::size_t k = 0; k < norms.size(); ++k) {
      acc[k].first = norms[k].first;
      acc[k].second += norms[k].second / static_cast<double>(batch_size * batches);
    }
  }
  for (auto& p : all) p.zero_grad();
  return acc;
}

inline std::string gradnorm_csv(const std::vector<std::pair<std::string, double>>& norms) {
  std::string s = "layer,grad_norm\n";
  for (const auto& [label, v] : norms) s += label + "," + detail::fmt_double(v) + "\n";
  return s;
}

}  // namespace sdetr
