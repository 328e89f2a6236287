#pragma once

#include <stdexcept>
#include <string>

namespace neuroalign {

// Base class for every error raised by the library. The CLI maps
// NumericError to exit code 3 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class NotFittedError : public Error {
 public:
  using Error::Error;
};

class OrderingError : public Error {
 public:
  using Error::Error;
};

}  // namespace neuroalign
