#pragma once

#include <stdexcept>
#include <string>

namespace bmt {

// Base class for everything this library throws on contract violations.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Incompatible tensor/matrix shapes. Message names both shapes.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid static configuration (odd/even constraints, divisibility, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Bad or insufficient input data (empty corpus, duplicate ids, ...).
struct DataError : Error {
    using Error::Error;
};

// Malformed on-disk artifact; message carries the byte offset where parsing failed.
struct FormatError : Error {
    using Error::Error;
};

// Call-site precondition violated (non-scalar backward seed, zero-length segment, ...).
struct ContractError : Error {
    using Error::Error;
};

// An attention/softmax row with every position masked out.
struct DegenerateMaskError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required (NaN loss).
struct NumericError : Error {
    using Error::Error;
};

} // namespace bmt
