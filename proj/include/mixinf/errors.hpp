#pragma once

#include <stdexcept>
#include <string>

namespace mixinf {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input: inconsistent shapes, missing rows, bad labels.
class StructuralError : public Error {
public:
    using Error::Error;
};

/// Invalid argument values (probabilities outside (0,1), m < 2, ...).
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// A covariance matrix that should be positive definite is not.
class DegeneracyError : public Error {
public:
    using Error::Error;
};

/// Rank deficiency of a design or information matrix.
class RankError : public Error {
public:
    using Error::Error;
};

/// Numerical failure (series non-convergence, indefinite estimates).
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace mixinf
