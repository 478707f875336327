#pragma once

#include <stdexcept>
#include <string>

namespace projnet {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor rank/extent mismatch, invalid architecture or out-of-range level.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed or unknown configuration input.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf produced by a forward op or a training step.
class NumericError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace projnet
