#pragma once

#include <stdexcept>
#include <string>

namespace percap {

// Error taxonomy mirrored by the CLI exit codes: configuration problems
// exit 2, data/file validation problems exit 3, everything else exit 1.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed file contents (bad magic, truncation, inconsistent rows).
struct FormatError : DataError {
  explicit FormatError(const std::string& msg) : DataError(msg) {}
};

// Violated in-process contract: shape mismatch, non-scalar loss, NaN grads.
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IndexError : ContractError {
  explicit IndexError(const std::string& msg) : ContractError(msg) {}
};

}  // namespace percap
