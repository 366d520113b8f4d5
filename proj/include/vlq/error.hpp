#pragma once

#include <stdexcept>
#include <string>

namespace vlq {

// Root of every error the library throws. The CLI maps NumericalError to
// exit code 3 and everything else to exit code 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Wrong width, wrong length, index out of range.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Invalid configuration values or mutually inconsistent options.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed, truncated or version-mismatched files.
class FormatError : public Error {
public:
    using Error::Error;
};

// A tensor stored in a file does not have the shape the reader expects.
class ShapeMismatchError : public FormatError {
public:
    ShapeMismatchError(const std::string& tensor, const std::string& detail)
        : FormatError("shape mismatch for tensor '" + tensor + "': " + detail), tensor_(tensor) {}
    const std::string& tensor() const { return tensor_; }

private:
    std::string tensor_;
};

// CSV / manifest content that cannot be interpreted.
class ParseError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// NaN/Inf values, zero-norm embeddings, undefined correlations, diverging loss.
class NumericalError : public Error {
public:
    using Error::Error;
};

} // namespace vlq
