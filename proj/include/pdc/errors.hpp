#pragma once

#include <stdexcept>
#include <string>

namespace pdc {

// Base for everything thrown by this library. The CLI maps subtypes to
// exit codes: ConfigError -> 1, DataError -> 2, anything else -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

// Zero-variance volume handed to normalize().
struct NormalizationError : DataError {
    using DataError::DataError;
};

// Head parameter lists that cannot be paired layer by layer.
struct PairingError : Error {
    using Error::Error;
};

// Gradient arrays that do not line up with the parameter store.
struct AlignmentError : Error {
    using Error::Error;
};

// Surface metrics requested on an empty mask.
struct EmptyMaskError : Error {
    using Error::Error;
};

struct ReportError : Error {
    using Error::Error;
};

}  // namespace pdc
