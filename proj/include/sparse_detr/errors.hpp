#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sdetr {

/// Violated precondition or invalid argument. Maps to CLI exit code 1.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Shape disagreement between operands.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Malformed or truncated binary file. Maps to CLI exit code 2.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// File could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace sdetr
