#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hdt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit an operation. The message names the
/// offending dimension.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or config/checkpoint mismatches.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File system and data-layout problems.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content. Carries the byte offset where decoding stopped.
class FormatError : public IoError {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : IoError(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace hdt
