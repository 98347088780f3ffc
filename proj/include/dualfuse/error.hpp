#pragma once

#include <stdexcept>
#include <string>

namespace dualfuse {

// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operands whose shapes disagree, or an image too small for an operator.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A value outside the domain an operation accepts (range, finiteness, flags).
class ValueError : public Error {
public:
    using Error::Error;
};

// Missing, unreadable, or unwritable files.
class IoError : public Error {
public:
    using Error::Error;
};

// Malformed manifest, annotation, image, or checkpoint content.
class FormatError : public Error {
public:
    using Error::Error;
};

// Training diverged or was asked to run on invalid input.
class TrainingError : public Error {
public:
    using Error::Error;
};

}  // namespace dualfuse
