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

#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>

#include "caliper/core_data.hpp"
#include "caliper/error.hpp"
#include "caliper/matching.hpp"

namespace caliper {

struct PointEstimates {
  double tau_hat = 0.0;
  double tau_t_hat = 0.0;
  std::size_t n = 0;
  std::size_t n_used_ate = 0;  ///< units with at least one match
  std::size_t n1 = 0;
  double p1_hat = 0.0;  ///< N1 / n
  std::size_t unmatched_treated = 0;
};

namespace detail {

inline void check_lengths(std::span<const double> y, std::span<const int> d, const MatchIndex& index) {
  if (y.size() != index.size() || d.size() != index.size()) {
    throw Error(ErrorKind::LengthMismatch, "outcome/treatment length differs from the match index");
  }
}

}  // namespace detail

/// ATE in the match-mean form: each matched unit contributes the difference
/// between its outcome and the mean outcome of its match set. O(sum_i M_i).
inline double ate_match_mean(std::span<const double> y, std::span<const int> d, const MatchIndex& index) {
  detail::check_lengths(y, d, index);
  long double total = 0.0L;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const auto set = index.matches(i);
    if (set.empty()) continue;
    long double mean = 0.0L;
    for (auto j : set) mean += y[j];
    mean /= static_cast<long double>(set.size());
    total += d[i] == 1 ? y[i] - mean : mean - y[i];
  }
  return static_cast<double>(total / static_cast<long double>(y.size()));
}

inline double att_match_mean(std::span<const double> y, std::span<const int> d, const MatchIndex& index) {
  detail::check_lengths(y, d, index);
  long double total = 0.0L;
  std::size_t n1 = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (d[i] != 1) continue;
    ++n1;
    const auto set = index.matches(i);
    if (set.empty()) continue;
    long double mean = 0.0L;
    for (auto j : set) mean += y[j];
    total += y[i] - mean / static_cast<long double>(set.size());
  }
  if (n1 == 0) throw Error(ErrorKind::NoTreated, "ATT needs at least one treated unit");
  return static_cast<double>(total / static_cast<long double>(n1));
}

/// ATE in the weighted form (1/n) sum_i (2D_i - 1)(1{M_i > 0} + w_i) Y_i.
inline double ate_hat(std::span<const double> y, std::span<const int> d, const MatchIndex& index) {
  detail::check_lengths(y, d, index);
  const auto m = index.m();
  const auto w = index.w();
  long double total = 0.0L;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double weight = (m[i] > 0 ? 1.0 : 0.0) + w[i];
    total += (d[i] == 1 ? 1.0L : -1.0L) * weight * y[i];
  }
  const double out = static_cast<double>(total / static_cast<long double>(y.size()));
  assert(std::fabs(out - ate_match_mean(y, d, index)) <= 1e-10 * (1.0 + std::fabs(out)));
  return out;
}

/// ATT in the weighted form (1/N1) sum_i (1{M_i > 0} D_i - (1 - D_i) w_i) Y_i.
inline double att_hat(std::span<const double> y, std::span<const int> d, const MatchIndex& index) {
  detail::check_lengths(y, d, index);
  const auto m = index.m();
  const auto w = index.w();
  long double total = 0.0L;
  std::size_t n1 = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (d[i] == 1) {
      ++n1;
      if (m[i] > 0) total += y[i];
    } else {
      total -= static_cast<long double>(w[i]) * y[i];
    }
  }
  if (n1 == 0) throw Error(ErrorKind::NoTreated, "ATT needs at least one treated unit");
  const double out = static_cast<double>(total / static_cast<long double>(n1));
  assert(std::fabs(out - att_match_mean(y, d, index)) <= 1e-10 * (1.0 + std::fabs(out)));
  return out;
}

inline double ate_hat(const ObservationTable& table, const MatchIndex& index) {
  return ate_hat(table.y(), table.d(), index);
}

inline double att_hat(const ObservationTable& table, const MatchIndex& index) {
  return att_hat(table.y(), table.d(), index);
}

inline PointEstimates point_estimates(std::span<const double> y, std::span<const int> d, const MatchIndex& index) {
  PointEstimates out;
  out.tau_hat = ate_hat(y, d, index);
  out.tau_t_hat = att_hat(y, d, index);
  out.n = y.size();
  const auto m = index.m();
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (m[i] > 0) ++out.n_used_ate;
    if (d[i] == 1) {
      ++out.n1;
      if (m[i] == 0) ++out.unmatched_treated;
    }
  }
  out.p1_hat = static_cast<double>(out.n1) / static_cast<double>(out.n);
  return out;
}

inline PointEstimates point_estimates(const ObservationTable& table, const MatchIndex& index) {
  return point_estimates(table.y(), table.d(), index);
}

}  // namespace caliper
