#pragma once

#include <stdexcept>
#include <string>

namespace kari {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed input text (annotation lines, map/checkpoint documents, config files).
class ParseError : public Error {
public:
  using Error::Error;
};

/// Well-formed input that violates a domain invariant.
class ValidationError : public Error {
public:
  using Error::Error;
};

/// Tensor or parameter shapes that do not fit together.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Missing or unreadable/unwritable file.
class IoError : public Error {
public:
  using Error::Error;
};

/// Numerical failure during training (non-finite loss).
class NumericError : public Error {
public:
  using Error::Error;
};

}  // namespace kari
