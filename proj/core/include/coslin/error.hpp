#pragma once

#include <stdexcept>
#include <string>

namespace coslin {

/// Tensor shape disagreement (includes both shapes in the message).
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A NaN or Inf appeared where the contract requires finite values.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Invalid configuration field (bad variant, non-divisible head count, ...).
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Malformed or inconsistent input data (CSV rows, duplicate keys, ...).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Training aborted (e.g. non-finite loss); message names the offending batch.
struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace coslin
