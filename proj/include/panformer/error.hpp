#pragma once

#include <stdexcept>
#include <string>

namespace panformer {

/// Base of every error the library throws. `kind()` is a stable short tag
/// used by the CLI when emitting machine-readable error JSON.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

/// Incompatible tensor or raster shapes.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error("dimension", what) {}
};

/// Invalid configuration value or unknown configuration key.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

/// Invalid numeric parameter passed to an operation (sigma <= 0, bad factor...).
class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& what) : Error("parameter", what) {}
};

/// API misuse, e.g. backward() on a non-scalar.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("contract", what) {}
};

/// A metric that is mathematically undefined for the given input.
class UndefinedMetricError : public Error {
 public:
  explicit UndefinedMetricError(const std::string& what) : Error("undefined_metric", what) {}
};

/// Missing file or entry.
class LookupError : public Error {
 public:
  explicit LookupError(const std::string& what) : Error("lookup", what) {}
};

/// Malformed file contents. The sub-kind distinguishes the failure mode.
class ParseError : public Error {
 public:
  enum class Reason { bad_magic, truncated, sample_range, version_mismatch, unknown_parameter, io, malformed };

  ParseError(Reason reason, const std::string& what) : Error("parse", what), reason_(reason) {}
  Reason reason() const noexcept { return reason_; }

 private:
  Reason reason_;
};

}  // namespace panformer
