#pragma once

#include <stdexcept>
#include <string>

namespace enteroseg {

// Base of every error thrown by the library. Callers that only need a
// message catch std::runtime_error; the CLI maps these to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace enteroseg
