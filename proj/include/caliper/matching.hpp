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

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "caliper/error.hpp"

namespace caliper {

/// How the caliper is chosen. Fixed: delta = s log(n) / n. DataDependent:
/// delta = max(largest closest distance, log N0 / (N0 + 1), log N1 / (N1 + 1)).
struct CaliperRule {
  enum class Kind { Fixed, DataDependent };
  Kind kind = Kind::DataDependent;
  double s = 1.0;

  static CaliperRule fixed(double s) {
    if (!(s > 0) || !std::isfinite(s)) throw Error(ErrorKind::InvalidArgument, "caliper constant s must be positive");
    return {Kind::Fixed, s};
  }
  static CaliperRule data_dependent() { return {Kind::DataDependent, 1.0}; }

  std::string name() const { return kind == Kind::Fixed ? "fixed" : "data_dependent"; }
};

namespace detail {

struct GroupOrder {
  std::array<std::vector<std::size_t>, 2> units;  // unit indices per group, ascending score
  std::array<std::vector<double>, 2> scores;      // the matching sorted scores
};

inline GroupOrder sort_groups(std::span<const double> scores, std::span<const int> d) {
  if (scores.size() != d.size()) throw Error(ErrorKind::LengthMismatch, "scores and treatment differ in length");
  GroupOrder order;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i] != 0 && d[i] != 1) throw Error(ErrorKind::NonBinaryTreatment, "unit " + std::to_string(i));
    if (!std::isfinite(scores[i])) throw Error(ErrorKind::NonFiniteValue, "score of unit " + std::to_string(i));
    order.units[static_cast<std::size_t>(d[i])].push_back(i);
  }
  if (order.units[0].empty() || order.units[1].empty()) {
    throw Error(ErrorKind::EmptyGroup, "both treatment groups must be nonempty");
  }
  for (int g = 0; g < 2; ++g) {
    auto& u = order.units[static_cast<std::size_t>(g)];
    std::sort(u.begin(), u.end(), [&](std::size_t a, std::size_t b) {
      return scores[a] < scores[b] || (scores[a] == scores[b] && a < b);
    });
    auto& s = order.scores[static_cast<std::size_t>(g)];
    s.reserve(u.size());
    for (auto i : u) s.push_back(scores[i]);
  }
  return order;
}

/// Distance from `value` to the closest element of the sorted array.
inline double closest_distance(std::span<const double> sorted, double value) {
  const auto it = std::lower_bound(sorted.begin(), sorted.end(), value);
  double best = std::numeric_limits<double>::infinity();
  if (it != sorted.end()) best = std::fabs(*it - value);
  if (it != sorted.begin()) best = std::min(best, std::fabs(*(it - 1) - value));
  return best;
}

}  // namespace detail

/// max_i min_{j: D_j != D_i} |score_i - score_j|, in O(n log n).
inline double largest_closest_distance(std::span<const double> scores, std::span<const int> d) {
  const auto order = detail::sort_groups(scores, d);
  double worst = 0.0;
  for (int g = 0; g < 2; ++g) {
    const auto& opposite = order.scores[static_cast<std::size_t>(1 - g)];
    for (double s : order.scores[static_cast<std::size_t>(g)]) {
      worst = std::max(worst, detail::closest_distance(opposite, s));
    }
  }
  return worst;
}

inline double caliper_value(const CaliperRule& rule, std::span<const double> scores, std::span<const int> d) {
  const auto n = scores.size();
  if (rule.kind == CaliperRule::Kind::Fixed) {
    if (n < 2) throw Error(ErrorKind::TooSmall, "fixed caliper needs n >= 2");
    return rule.s * std::log(static_cast<double>(n)) / static_cast<double>(n);
  }
  if (d.size() != n) throw Error(ErrorKind::LengthMismatch, "scores and treatment differ in length");
  const auto n1 = static_cast<std::size_t>(std::count(d.begin(), d.end(), 1));
  const auto n0 = n - n1;
  if (n0 < 2 || n1 < 2) {
    throw Error(ErrorKind::TooSmall, "data-dependent caliper needs at least two units per group (N0=" +
                                         std::to_string(n0) + ", N1=" + std::to_string(n1) + ")");
  }
  const auto log_term = [](std::size_t m) {
    return std::log(static_cast<double>(m)) / (static_cast<double>(m) + 1.0);
  };
  return std::max({largest_closest_distance(scores, d), log_term(n0), log_term(n1)});
}

/// Caliper match sets stored as intervals into the opposite group's
/// score-sorted unit list: J(i) = {j : D_j != D_i, |score_j - score_i| <= delta}.
class MatchIndex {
 public:
  MatchIndex(std::span<const double> scores, std::span<const int> d, double delta)
      : scores_(scores.begin(), scores.end()), d_(d.begin(), d.end()), delta_(delta) {
    if (!(delta > 0) || !std::isfinite(delta)) {
      throw Error(ErrorKind::NonPositiveCaliper, "caliper must be positive and finite");
    }
    order_ = detail::sort_groups(scores_, d_);
    const auto n = scores_.size();
    lo_.resize(n);
    hi_.resize(n);
    m_.resize(n);
    w_.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& opp = order_.scores[static_cast<std::size_t>(1 - d_[i])];
      const double s = scores_[i];
      // Both predicates are monotone along the sorted array and use the same
      // rounded difference as |s_j - s_i| <= delta, so ties at delta match.
      const auto first = std::partition_point(opp.begin(), opp.end(), [&](double v) { return s - v > delta; });
      const auto last = std::partition_point(first, opp.end(), [&](double v) { return v - s <= delta; });
      lo_[i] = static_cast<std::size_t>(first - opp.begin());
      hi_[i] = static_cast<std::size_t>(last - opp.begin());
      m_[i] = hi_[i] - lo_[i];
    }
    // w_i = sum_{j in J(i)} 1 / M_j via prefix sums over each group's order.
    for (int g = 0; g < 2; ++g) {
      const auto& units = order_.units[static_cast<std::size_t>(g)];
      auto& prefix = prefix_inv_m_[static_cast<std::size_t>(g)];
      prefix.assign(units.size() + 1, 0.0L);
      for (std::size_t r = 0; r < units.size(); ++r) {
        const auto mj = m_[units[r]];
        prefix[r + 1] = prefix[r] + (mj > 0 ? 1.0L / static_cast<long double>(mj) : 0.0L);
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (m_[i] == 0) continue;
      const auto& prefix = prefix_inv_m_[static_cast<std::size_t>(1 - d_[i])];
      w_[i] = static_cast<double>(prefix[hi_[i]] - prefix[lo_[i]]);
    }
  }

  std::size_t size() const noexcept { return scores_.size(); }
  double delta() const noexcept { return delta_; }
  std::span<const double> scores() const noexcept { return scores_; }
  std::span<const int> d() const noexcept { return d_; }
  std::span<const std::size_t> m() const noexcept { return m_; }
  std::span<const double> w() const noexcept { return w_; }
  std::size_t lo(std::size_t i) const { return lo_.at(i); }
  std::size_t hi(std::size_t i) const { return hi_.at(i); }

  /// Units of group `g` in ascending score order.
  std::span<const std::size_t> sorted_group(int g) const { return order_.units.at(static_cast<std::size_t>(g)); }

  /// J(i) as a view of opposite-group unit indices (ascending score).
  std::span<const std::size_t> matches(std::size_t i) const {
    const auto& opp = order_.units[static_cast<std::size_t>(1 - d_.at(i))];
    return std::span<const std::size_t>(opp).subspan(lo_[i], hi_[i] - lo_[i]);
  }

 private:
  std::vector<double> scores_;
  std::vector<int> d_;
  double delta_;
  detail::GroupOrder order_;
  std::vector<std::size_t> lo_, hi_, m_;
  std::vector<double> w_;
  std::array<std::vector<long double>, 2> prefix_inv_m_;
};

inline MatchIndex build_match_index(std::span<const double> scores, std::span<const int> d, double delta) {
  return MatchIndex(scores, d, delta);
}

struct MatchDiagnostics {
  std::size_t min_m = 0;
  std::size_t max_m = 0;
  double mean_m = 0.0;
  std::size_t unmatched = 0;
  std::size_t unmatched_treated = 0;
  std::size_t unmatched_control = 0;
  double delta = 0.0;
};

inline MatchDiagnostics match_diagnostics(const MatchIndex& index) {
  MatchDiagnostics out;
  out.delta = index.delta();
  const auto m = index.m();
  if (m.empty()) return out;
  out.min_m = *std::min_element(m.begin(), m.end());
  out.max_m = *std::max_element(m.begin(), m.end());
  double total = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    total += static_cast<double>(m[i]);
    if (m[i] == 0) {
      ++out.unmatched;
      ++(index.d()[i] == 1 ? out.unmatched_treated : out.unmatched_control);
    }
  }
  out.mean_m = total / static_cast<double>(m.size());
  return out;
}

}  // namespace caliper
