#pragma once

#include <stdexcept>
#include <string>

namespace rsf {

// Root of every error raised by the library. Each module derives typed
// errors from it so callers can catch narrowly or broadly.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed arguments that violate an operation's precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace rsf
