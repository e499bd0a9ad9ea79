#pragma once

#include <stdexcept>
#include <string>

namespace fccl {

/// Error categories map onto CLI exit codes.
enum class ErrorCategory { config = 2, data = 3, numeric = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCategory::config, what) {}
};

class DataError : public Error {
 public:
  enum class Kind { invalid_argument, io, bad_magic, truncated, count_mismatch, shape_mismatch };
  DataError(Kind kind, const std::string& what) : Error(ErrorCategory::data, what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Raised for non-finite values; `layer` is -1 when not attributable to a layer.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, int layer = -1)
      : Error(ErrorCategory::numeric, what), layer_(layer) {}
  int layer() const noexcept { return layer_; }

 private:
  int layer_;
};

/// Shape or layout incompatibility. Counted as a data error at the CLI.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorCategory::data, what) {}
};

}  // namespace fccl
