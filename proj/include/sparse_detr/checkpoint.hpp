#pragma once

// Flat parameter checkpoint: "SDTR1", then per parameter
//   u32 name length, UTF-8 name, u32 rank, u32 dims..., f32 values...
// all little-endian. The file ends exactly after the last record.

#include <string>
#include <utility>
#include <vector>

#include "sparse_detr/binary_io.hpp"
#include "sparse_detr/tensor.hpp"

namespace sdetr {

inline constexpr std::string_view kCheckpointMagic = "SDTR1";

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

struct StoredParam {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

template <typename T>
io::ByteWriter encode_checkpoint(const NamedParams<T>& params) {
  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  for (const auto& [name, t] : params) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (T v : t.data()) w.f32(static_cast<float>(v));
  }
  return w;
}

template <typename T>
void save_checkpoint(const std::string& path, const NamedParams<T>& params) {
  encode_checkpoint(params).write_file(path);
}

inline std::vector<StoredParam> decode_checkpoint(io::ByteReader& r) {
  r.expect_magic(kCheckpointMagic);
  std::vector<StoredParam> out;
  while (!r.at_end()) {
    StoredParam p;
    const auto len = r.u32("parameter name length");
    p.name = r.string(len, "parameter name");
    const auto rank = r.u32("parameter rank");
    if (rank > 8) throw FormatError("implausible rank " + std::to_string(rank) + " for '" + p.name + "'", r.offset() - 4);
    for (std::uint32_t i = 0; i < rank; ++i) p.shape.push_back(r.u32("parameter dims"));
    const std::size_t n = shape_numel(p.shape);
    r.need(4 * n, "parameter values of '" + p.name + "'");
    p.values.resize(n);
    for (auto& v : p.values) v = r.f32("parameter values");
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<StoredParam> read_checkpoint(const std::string& path) {
  auto r = io::ByteReader::from_file(path);
  return decode_checkpoint(r);
}

/// Copies stored values into `params`; names, order and shapes must match exactly.
template <typename T>
void assign_checkpoint(const std::vector<StoredParam>& stored, const NamedParams<T>& params) {
  if (stored.size() != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(stored.size()) + " parameters, model expects " +
                          std::to_string(params.size()),
                      0);
  }
  for (std::size_t i = 0; i < stored.size(); ++i) {
    const auto& [name, t] = params[i];
    if (stored[i].name != name) throw FormatError("parameter " + std::to_string(i) + " is '" + stored[i].name + "', expected '" + name + "'", 0);
    if (stored[i].shape != t.shape())
      throw FormatError("parameter '" + name + "' has shape " + shape_str(stored[i].shape) + ", expected " + shape_str(t.shape()), 0);
    auto dst = t.mutable_data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(stored[i].values[k]);
  }
}

template <typename T>
void load_checkpoint(const std::string& path, const NamedParams<T>& params) {
  assign_checkpoint(read_checkpoint(path), params);
}

}  // namespace sdetr
