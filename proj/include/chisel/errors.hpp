// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace chisel {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shape or dimension mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data (CSV rows, labels, caches).
class DataError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf values, divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or combinations.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Missing files, short reads, bad magic or hash.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace chisel
