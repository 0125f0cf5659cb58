/*
 * Copyright 2026 The caliper-match Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace caliper {

enum class ErrorKind {
  FileNotFound,
  SchemaMismatch,
  NonBinaryTreatment,
  NonFiniteValue,
  TooSmall,
  DegenerateSplit,
  RankDeficient,
  Separation,
  NoConvergence,
  SingularInformation,
  DimensionMismatch,
  EmptyGroup,
  NonPositiveCaliper,
  LengthMismatch,
  NoTreated,
  DensityFloor,
  DegenerateWindow,
  BadAlpha,
  TooLarge,
  InvalidArgument,
};

constexpr std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::FileNotFound: return "FileNotFound";
    case ErrorKind::SchemaMismatch: return "SchemaMismatch";
    case ErrorKind::NonBinaryTreatment: return "NonBinaryTreatment";
    case ErrorKind::NonFiniteValue: return "NonFiniteValue";
    case ErrorKind::TooSmall: return "TooSmall";
    case ErrorKind::DegenerateSplit: return "DegenerateSplit";
    case ErrorKind::RankDeficient: return "RankDeficient";
    case ErrorKind::Separation: return "Separation";
    case ErrorKind::NoConvergence: return "NoConvergence";
    case ErrorKind::SingularInformation: return "SingularInformation";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::EmptyGroup: return "EmptyGroup";
    case ErrorKind::NonPositiveCaliper: return "NonPositiveCaliper";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::NoTreated: return "NoTreated";
    case ErrorKind::DensityFloor: return "DensityFloor";
    case ErrorKind::DegenerateWindow: return "DegenerateWindow";
    case ErrorKind::BadAlpha: return "BadAlpha";
    case ErrorKind::TooLarge: return "TooLarge";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Error raised by every fallible operation in the library. `stage` is empty
/// unless the error passed through the estimation pipeline, which labels it
/// with the step that failed.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message, std::string stage = {})
      : std::runtime_error(compose(kind, message, stage)),
        kind_(kind),
        detail_(message),
        stage_(std::move(stage)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& detail() const noexcept { return detail_; }
  const std::string& stage() const noexcept { return stage_; }

  Error with_stage(std::string stage) const { return Error(kind_, detail_, std::move(stage)); }

 private:
  static std::string compose(ErrorKind kind, const std::string& message,
                             const std::string& stage) {
    std::string out;
    if (!stage.empty()) out += "[" + stage + "] ";
    out += std::string(to_string(kind));
    if (!message.empty()) out += ": " + message;
    return out;
  }

  ErrorKind kind_;
  std::string detail_;
  std::string stage_;
};

}  // namespace caliper
