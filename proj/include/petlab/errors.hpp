#pragma once

#include <stdexcept>
#include <string>

namespace petlab {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape / dimension mismatches.
struct ShapeError : Error {
    using Error::Error;
};

// API misuse (backward on a non-scalar, evaluate on an empty set, ...).
struct ContractError : Error {
    using Error::Error;
};

// Bad method / experiment / dataset configuration.
struct ConfigError : Error {
    using Error::Error;
};

// NaN inputs, diverging losses.
struct NumericError : Error {
    using Error::Error;
};

// Corrupt or truncated files, bad magic, checksum mismatch.
struct IoError : Error {
    using Error::Error;
};

// A function that must be deterministic produced two different values.
struct DeterminismError : Error {
    using Error::Error;
};

// Optimization failed to make required progress (e.g. during pretraining).
struct TrainingError : Error {
    using Error::Error;
};

}  // namespace petlab
