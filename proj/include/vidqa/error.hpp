#pragma once

#include <stdexcept>
#include <string>

namespace vidqa {

// Error taxonomy; the CLI maps these onto distinct exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad configuration value or flag combination.
struct ConfigError : Error {
    using Error::Error;
};

// Tensor dimension mismatch.
struct ShapeError : Error {
    using Error::Error;
};

// Malformed file or manifest.
struct DataError : Error {
    using Error::Error;
};

// Semantically invalid runtime input (empty video, oversized request, ...).
struct InputError : Error {
    using Error::Error;
};

// Operation not legal in the object's current state.
struct StateError : Error {
    using Error::Error;
};

// Non-finite loss or failed numeric integrity check.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace vidqa
