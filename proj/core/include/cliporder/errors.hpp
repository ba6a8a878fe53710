#pragma once

#include <stdexcept>
#include <string>

namespace cliporder {

// Exit-code taxonomy used by the CLI: ConfigError -> 1, DataError -> 2,
// NumericError -> 3. Everything else is a programming contract violation.

/// Invalid configuration (bad preset, inconsistent dimensions, bad flag).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Missing or malformed input artifact (dataset, checkpoint, manifest).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Byte-level container violation (bad magic, truncated payload).
struct FormatError : DataError {
  explicit FormatError(const std::string& msg) : DataError(msg) {}
};

/// NaN/Inf or divergence in numeric state.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape mismatch between tensors.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Precondition violation on an operation (degenerate input, bad axis, ...).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cliporder
