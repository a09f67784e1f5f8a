#pragma once

#include <stdexcept>
#include <string>

namespace mano {

/// Shape / contract violation (bad operand dimensions, invalid arguments).
struct DimError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Invalid configuration detected at construction time.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// File read/write failure.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Numerical failure at runtime (NaN loss, solver non-convergence).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace mano
