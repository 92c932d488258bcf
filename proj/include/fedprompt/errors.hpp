//
// Copyright 2026 The FedPrompt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#pragma once

#include <stdexcept>
#include <string>

namespace fedprompt {

// Base of every error raised by the library. Subclasses mirror the error
// categories callers are expected to distinguish.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Out-of-range index (labels, rows, classes).
class IndexError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value or geometry.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input data unusable for the requested computation (empty shard, all-zero
// priors).
class DataError : public Error {
 public:
  using Error::Error;
};

// Violation of the federated protocol (empty aggregation round, etc).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss during local training. Carries the round and client that
// produced it.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t round, std::size_t client)
      : Error(what + " (round " + std::to_string(round) + ", client " +
              std::to_string(client) + ")"),
        round_(round),
        client_(client) {}

  std::size_t round() const { return round_; }
  std::size_t client() const { return client_; }

 private:
  std::size_t round_;
  std::size_t client_;
};

// Finite-difference oracle could not evaluate the function.
class OracleError : public Error {
 public:
  using Error::Error;
};

}  // namespace fedprompt
