#pragma once

#include <stdexcept>
#include <string>

namespace reddot {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed file container (bad magic, version, truncation).
struct FormatError : Error {
  using Error::Error;
};

// Semantically invalid data (non-finite values, dangling ids, duplicates).
struct DataError : Error {
  using Error::Error;
};

// Filesystem failures.
struct IoError : Error {
  using Error::Error;
};

// Invalid configuration or parameters.
struct ConfigError : Error {
  using Error::Error;
};

// Tensor shape disagreement.
struct ShapeError : Error {
  using Error::Error;
};

// Operation called in a state that does not support it.
struct StateError : Error {
  using Error::Error;
};

// NaN/Inf produced during computation.
struct NumericalError : Error {
  using Error::Error;
};

}  // namespace reddot
