#pragma once

#include <stdexcept>
#include <string>

namespace mmsd {

// Invalid tensor shapes (mismatched dimensions, bad extents).
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid configuration (bad variant switches, zero step counts, unknown kinds).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Broken input data: manifests, feature files, checkpoints, labels.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// API misuse detected at run time (non-scalar loss, length mismatches).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

// NaN/Inf produced by a forward operation.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Failures inside the optimization loop (non-finite loss, NaN gradients).
struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mmsd
