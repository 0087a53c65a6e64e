#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace vlseg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameter or geometry (even kernel, indivisible channels, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed data (non one-hot mask, unknown word, out-of-vocab id).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Violated call contract (non-scalar loss, negative step size, NaN).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// File could not be opened, created or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed file. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), detail_(what), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }
  /// Message without the offset suffix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string detail_;
  std::size_t offset_;
};

}  // namespace vlseg
