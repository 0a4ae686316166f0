#pragma once

#include <stdexcept>
#include <string>

namespace weckd {

// Incompatible tensor shapes. Messages carry both offending shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A caller violated an operation precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// NaN/Inf produced or consumed where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration value. `path()` names the offending key when known.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& message, std::string path = {})
      : std::invalid_argument(path.empty() ? message : path + ": " + message),
        path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// Malformed binary input (IDX or checkpoint). `offset()` is the byte
// position at which parsing failed.
class ParseError : public std::runtime_error {
 public:
  enum class Kind { bad_magic, bad_version, truncated, count_mismatch, shape_mismatch, bad_config };

  ParseError(Kind kind, std::size_t offset, const std::string& message)
      : std::runtime_error(message + " (at byte offset " + std::to_string(offset) + ")"),
        kind_(kind),
        offset_(offset) {}

  Kind kind() const noexcept { return kind_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  Kind kind_;
  std::size_t offset_;
};

// Stage composition failure in the distillation chain, e.g. class-count
// mismatch between teacher and student.
class ChainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace weckd
