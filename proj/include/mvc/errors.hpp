#pragma once

#include <stdexcept>
#include <string>

namespace mvc {

// Thrown when operand shapes violate a primitive's shape rule.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown on misuse of the reverse-mode tape (non-scalar loss, loss not recorded).
struct TapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dataset / file format problems. CLI maps these to exit code 2.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values or failed numeric gates. CLI maps these to exit code 3.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration (bad sizes, unknown modes). CLI maps these to exit code 1.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace mvc
