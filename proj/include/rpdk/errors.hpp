// Copyright 2026 The rpdk Authors. All Rights Reserved.
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
#include <string_view>

namespace rpdk {

enum class Errc {
  ShapeMismatch,
  RankMismatch,
  InvalidHyperparam,
  NonDeterministicLayer,
  NonFinite,
  DuplicateName,
  UnknownPoolFn,
  EmptyVoxel,
  WindowTooLarge,
  NonUnitLiftedAxis,
  StaleFold,
  DegenerateRoi,
  InvalidSpec,
  DivergedLoss,
  InvalidConfig,
  MissingCheckpoint,
  CheckpointMismatch,
  IoError,
};

std::string_view errc_name(Errc code) noexcept;

/// Every failure raised by the library carries one of the codes above so that
/// callers and tests can branch on the kind without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& message) { throw Error(code, message); }

inline void require(bool condition, Errc code, const std::string& message) {
  if (!condition) fail(code, message);
}

/// Runtime switch for the expensive checks (finite outputs, stale folds).
/// Defaults to on in debug builds.
bool debug_validation() noexcept;
void set_debug_validation(bool enabled) noexcept;

}  // namespace rpdk
