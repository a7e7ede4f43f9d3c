#pragma once

#include <stdexcept>
#include <string>

namespace ogmpred {

// Every error thrown by the library derives from Error so callers can map
// failures onto exit codes without knowing the throwing module.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class InvalidPose : public Error {
 public:
  using Error::Error;
};

/// Violated precondition of an operation (e.g. missing feedback frame).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf encountered during a forward pass or in a loss value.
class NumericFault : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

}  // namespace ogmpred
