// Copyright 2026 The sdmtss Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace sdmtss {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or unsupported input data (WAV headers, CSV, RTTM, manifests).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration value or violated precondition on an argument.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Shape mismatch or non-finite value inside the differentiation engine.
class TensorError : public Error {
 public:
  using Error::Error;
};

/// A data condition that makes the request unanswerable, as opposed to a
/// usage mistake. The CLI maps these to exit code 3.
class DataError : public Error {
 public:
  using Error::Error;
};

class NoSingleTalkerSegment : public DataError {
 public:
  explicit NoSingleTalkerSegment(std::string speaker)
      : DataError("no single-talker segment long enough for speaker '" +
                  speaker + "'"),
        speaker_(std::move(speaker)) {}
  const std::string& speaker() const noexcept { return speaker_; }

 private:
  std::string speaker_;
};

}  // namespace sdmtss
