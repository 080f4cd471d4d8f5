// Copyright 2026 The flashdec Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace flashdec {

// Base of every error thrown by the library. `kind()` is a stable,
// machine-parsable class name that the CLI prints and maps to exit codes.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept = 0;
};

class DimensionError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "dimension_error"; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config_error"; }
};

class ContractError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "contract_error"; }
};

class NumericalError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numerical_error"; }
};

// Raised when a variance denominator (SS_tot) is zero.
class DegenerateVarianceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
  const char* kind() const noexcept override { return "degenerate_variance"; }
};

class RankError : public NumericalError {
 public:
  using NumericalError::NumericalError;
  const char* kind() const noexcept override { return "rank_error"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io_error"; }
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
  const char* kind() const noexcept override { return "format_error"; }
};

class ChecksumError : public IoError {
 public:
  using IoError::IoError;
  const char* kind() const noexcept override { return "checksum_error"; }
};

}  // namespace flashdec
