#pragma once

#include <stdexcept>
#include <string>

namespace sortsim {

// Exception hierarchy for the C++ core. The C API maps each type to an error
// code (see sortsim.h), and the CLI maps those to process exit codes.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad arguments or configuration supplied by the caller.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data (corpora, checkpoints, replies).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Training diverged or a statistic is undefined.
class NumericError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

}  // namespace sortsim
