// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace arlab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Base class for every error raised by the lab.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated (time outside [0,1], empty input, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A covariance or normal-equation system that must be inverted is singular.
class SingularError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf appeared in a state, gradient or loss.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Malformed serialized input. `line()` is 1-based, 0 when not applicable.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t line = 0)
      : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

using Rng = std::mt19937_64;

/// Counter-based seed derivation (splitmix64 finalizer over master and index).
/// Item `index` of a batch always receives the same stream regardless of how
/// the batch is partitioned across workers.
std::uint64_t split_seed(std::uint64_t master, std::uint64_t index);

/// Fills a rows x cols matrix with i.i.d. N(0,1) draws, column-major order.
Mat standard_normal(Index rows, Index cols, Rng& rng);

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline void require_finite(const Mat& m, const std::string& what) {
  if (!m.allFinite()) throw NumericalError("non-finite value in " + what);
}

}  // namespace arlab
