#pragma once

#include <stdexcept>
#include <string>

namespace mpum {

// Base of all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed inputs: bad files, inconsistent grids, unknown names. CLI exit 2.
struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(msg) {}
};

// File format violations (bad magic, unsupported datatype, truncation).
struct FormatError : DataError {
    explicit FormatError(const std::string& msg) : DataError(msg) {}
};

// Tensor/volume extent mismatches.
struct ShapeError : DataError {
    explicit ShapeError(const std::string& msg) : DataError(msg) {}
};

// Numerical failures: non-finite values, singular systems, divergence. CLI exit 3.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

}  // namespace mpum
