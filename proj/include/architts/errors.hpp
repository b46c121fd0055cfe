#pragma once

#include <stdexcept>
#include <string>

namespace architts {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape / dimension mismatches.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid argument values (out-of-range ids, bad durations, empty inputs).
struct ValidationError : Error {
    explicit ValidationError(const std::string& msg) : Error(msg) {}
};

// Bad or inconsistent configuration (unknown keys, impossible settings).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// File I/O failures; message carries the offending path.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Non-finite values or other numeric breakdowns.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Target sequence cannot be aligned within the given frame budget.
struct InfeasibleError : Error {
    explicit InfeasibleError(const std::string& msg) : Error(msg) {}
};

}  // namespace architts
