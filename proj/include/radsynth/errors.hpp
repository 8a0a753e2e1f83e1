#pragma once

#include <stdexcept>
#include <string>

namespace radsynth {

// Error families map to CLI exit codes: config=2, numerical=3, io=4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& m) : std::runtime_error(m) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

} // namespace radsynth
