#pragma once

#include <stdexcept>
#include <string>

namespace treelab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Bad command line, unknown config key, invalid parameter value.
class UsageError : public Error {
public:
  using Error::Error;
};

/// Missing or malformed input data (files, graphs, shape mismatches).
class DataError : public Error {
public:
  using Error::Error;
};

/// Non-finite values, divergence, degenerate statistics.
class NumericalError : public Error {
public:
  using Error::Error;
};

}  // namespace treelab
