// Copyright 2026 The EMoE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace emoe {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An argument is outside its documented range.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// A structural invariant (balance, disjointness, index coverage) is violated.
class ConstraintError : public Error {
 public:
  using Error::Error;
};

/// Reading or writing a file failed at the filesystem level.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A serialized file is malformed.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A serialized file is well-formed but its contents are not acceptable
/// (non-finite payloads, unbalanced partitions, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// An operation was applied to an object in the wrong state, e.g. converting
/// a block that is already sparse, or a stale forward cache.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace emoe
