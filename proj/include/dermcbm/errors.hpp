#pragma once

#include <stdexcept>
#include <string>

namespace dermcbm {

// Base for every error raised by the library. The CLI maps subclasses to
// exit codes: NumericalError -> 3, everything else -> 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent file contents (EMB1 payloads, sidecars, JSON).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Shape disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid user-supplied configuration or data that violates a precondition.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Degenerate numerics: zero vectors under cosine, non-finite values, etc.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace dermcbm
