// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mslora {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent configuration. `line` is 0 when not tied to a file line.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what, std::size_t line = 0)
        : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Checkpoint / binary matrix / CSV format problems.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss or parameter during training.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace mslora
