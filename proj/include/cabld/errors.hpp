// errors.hpp — exception taxonomy mapped to CLI exit codes.
#pragma once

#include <stdexcept>
#include <string>

namespace cabld {

// Bad configuration / arguments: exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Missing / malformed / inconsistent data files: exit code 3.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure (singular system, NaN, divergence): exit code 4.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Singular or near-singular linear system; subtype so the trainer can
// skip-and-resample without swallowing other numerical failures.
struct SingularSystem : NumericalError {
    explicit SingularSystem(const std::string& msg) : NumericalError(msg) {}
};

}  // namespace cabld
