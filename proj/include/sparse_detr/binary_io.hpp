#pragma once

// Little-endian readers and writers shared by the checkpoint, dataset and
// dump formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sparse_detr/errors.hpp"

namespace sdetr::io {

class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

  const std::vector<char>& buffer() const { return buf_; }

  void write_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw IoError("write to '" + path + "' failed");
  }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> data) : data_(std::move(data)) {}

  static ByteReader from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return ByteReader(std::move(data));
  }

  std::size_t offset() const { return pos_; }
  std::size_t size() const { return data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }

  /// Throws a FormatError naming the expected and actual length if fewer than n bytes remain.
  void need(std::size_t n, std::string_view what) const {
    if (remaining() < n) {
      throw FormatError("truncated " + std::string(what) + ": expected file length of at least " +
                            std::to_string(pos_ + n) + " bytes, actual length " + std::to_string(data_.size()),
                        pos_);
    }
  }

  void expect_magic(std::string_view magic) {
    need(magic.size(), "header");
    if (std::string_view(data_.data() + pos_, magic.size()) != magic)
      throw FormatError("bad magic, expected '" + std::string(magic) + "'", pos_);
    pos_ += magic.size();
  }

  std::string string(std::size_t n, std::string_view what) {
    need(n, what);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(std::string_view what) {
    need(1, what);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32(std::string_view what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(std::string_view what) { return std::bit_cast<float>(u32(what)); }

 private:
  std::vector<char> data_;
  std::size_t pos_ = 0;
};

}  // namespace sdetr::io
