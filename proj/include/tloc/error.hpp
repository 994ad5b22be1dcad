#pragma once

#include <stdexcept>
#include <string>

namespace tloc {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes do not conform (matmul inner dims, non-square matrix, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Two sequences that must be aligned in time are not.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

/// A function under evaluation produced a non-finite value.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

class EmptySequenceError : public Error {
 public:
  using Error::Error;
};

/// Malformed file, manifest or checkpoint.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Training loss exceeded the divergence bound.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace tloc
