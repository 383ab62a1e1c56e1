#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace tavt {

/// Invalid or inconsistent configuration (unknown family, out-of-range coefficient, ...).
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument("config error: " + what) {}
};

/// Malformed input data: non-finite values, dimension mismatches, out-of-range indices.
class InputError : public std::invalid_argument {
 public:
  explicit InputError(const std::string& what) : std::invalid_argument("input error: " + what) {}
};

/// Requested data does not exist yet (e.g. sampling from an empty buffer).
class UnavailableError : public std::runtime_error {
 public:
  explicit UnavailableError(const std::string& what) : std::runtime_error("unavailable: " + what) {}
};

/// A training loss became NaN or infinite.
class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& what, std::string record = {})
      : std::runtime_error("non-finite loss: " + what), record(std::move(record)) {}

  /// Diagnostic metric record (one JSON line) describing the failing step.
  std::string record;
};

}  // namespace tavt
