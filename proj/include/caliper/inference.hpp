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

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "caliper/core_data.hpp"
#include "caliper/error.hpp"
#include "caliper/estimators.hpp"
#include "caliper/matching.hpp"
#include "caliper/normal.hpp"
#include "caliper/propensity.hpp"
#include "caliper/variance.hpp"

namespace caliper {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  double center() const noexcept { return 0.5 * (lo + hi); }
  double halfwidth() const noexcept { return 0.5 * (hi - lo); }
  bool contains(double v) const noexcept { return lo <= v && v <= hi; }
};

/// z_{1 - alpha/2}.
inline double critical_value(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error(ErrorKind::BadAlpha, "alpha must lie in (0, 1)");
  return normal::quantile(1.0 - 0.5 * alpha);
}

/// center +- z_{1 - alpha/2} sqrt(v_hat / n).
inline Interval confidence_interval(double center, double v_hat, std::size_t n, double alpha) {
  const double z = critical_value(alpha);
  if (n == 0) throw Error(ErrorKind::TooSmall, "confidence interval needs n >= 1");
  if (!(v_hat >= 0.0) || !std::isfinite(v_hat)) throw Error(ErrorKind::InvalidArgument, "variance must be finite and >= 0");
  if (!std::isfinite(center)) throw Error(ErrorKind::NonFiniteValue, "interval center is not finite");
  const double h = z * std::sqrt(v_hat / static_cast<double>(n));
  return {center - h, center + h};
}

enum class ScoreMode { Estimated, Known };

inline std::string_view to_string(ScoreMode m) noexcept { return m == ScoreMode::Known ? "known" : "estimated"; }

struct PipelineConfig {
  Link link = Link::logit();
  CaliperRule caliper = CaliperRule::data_dependent();
  std::optional<double> delta;  ///< explicit caliper, overriding the rule
  double alpha = 0.05;
  KernelBandwidths bandwidths;
  MleOptions mle;
  unsigned threads = 1;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw Error(ErrorKind::BadAlpha, "alpha must lie in (0, 1)");
    if (caliper.kind == CaliperRule::Kind::Fixed && (!(caliper.s > 0.0) || !std::isfinite(caliper.s))) {
      throw Error(ErrorKind::NonPositiveCaliper, "caliper scale s must be positive");
    }
    if (delta && (!(*delta > 0.0) || !std::isfinite(*delta))) {
      throw Error(ErrorKind::NonPositiveCaliper, "explicit caliper must be positive");
    }
    bandwidths.validate();
    if (!(mle.tol > 0.0) || mle.max_iter < 1 || mle.max_halvings < 0) {
      throw Error(ErrorKind::InvalidArgument, "invalid MLE options");
    }
  }
};

struct FitSummary {
  Eigen::VectorXd theta;
  Eigen::MatrixXd vtheta;
  double loglik = 0.0;
  int iterations = 0;
  double grad_sup_norm = 0.0;
  std::size_t n_fit = 0;
};

struct EstimationReport {
  ScoreMode mode = ScoreMode::Estimated;
  PointEstimates estimates;
  VarianceReport variance;
  Interval ci_ate;
  Interval ci_att;
  double alpha = 0.05;
  double z = 0.0;
  std::size_t n_input = 0;
  std::size_t n_estimation = 0;
  MatchDiagnostics matches;
  std::optional<FitSummary> fit;
  unsigned split_attempts = 0;
  // Configuration echo.
  std::string link;
  std::string caliper_rule;
  double caliper_s = 1.0;
  std::optional<double> caliper_override;
  KernelBandwidths bandwidths;
  std::uint64_t seed = 0;
};

namespace detail {

template <class F>
auto staged(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    if (!e.stage().empty()) throw;
    throw e.with_stage(stage);
  }
}

inline void echo_config(EstimationReport& r, const PipelineConfig& c, std::uint64_t seed) {
  r.alpha = c.alpha;
  r.link = std::string(c.link.name());
  r.caliper_rule = c.delta ? "explicit" : c.caliper.name();
  r.caliper_s = c.caliper.s;
  r.caliper_override = c.delta;
  r.bandwidths = c.bandwidths;
  r.seed = seed;
}

/// Caliper, matching, point estimates, variance and intervals on a sample
/// whose scores are already available.
inline void estimate_on_scores(EstimationReport& r, const ObservationTable& table, std::span<const double> scores,
                               const PipelineConfig& config, const std::optional<FittedIndex>& fitted) {
  const double delta = staged("caliper", [&] {
    return config.delta ? *config.delta : caliper_value(config.caliper, scores, table.d());
  });
  const auto index = staged("match", [&] { return build_match_index(scores, table.d(), delta); });
  r.matches = match_diagnostics(index);
  r.estimates = staged("estimate", [&] { return point_estimates(table, index); });
  r.variance = staged("variance", [&] {
    return variance_components(table.y(), table.d(), scores, r.estimates, config.bandwidths, fitted, config.threads);
  });
  r.n_estimation = table.n();
  staged("inference", [&] {
    r.z = critical_value(config.alpha);
    r.ci_ate = confidence_interval(r.estimates.tau_hat, r.variance.v_total_ate, r.n_estimation, config.alpha);
    r.ci_att = confidence_interval(r.estimates.tau_t_hat, r.variance.v_total_att, r.n_estimation, config.alpha);
    return 0;
  });
}

}  // namespace detail

/// Estimated-score pipeline: split the sample, fit the propensity model on
/// one half, and estimate on the other half with the fitted scores.
inline EstimationReport run_pipeline(const ObservationTable& table, const PipelineConfig& config, std::uint64_t seed) {
  detail::staged("config", [&] {
    config.validate();
    return 0;
  });
  if (table.n() < 8) {
    throw Error(ErrorKind::TooSmall, "the pipeline needs n >= 8, got " + std::to_string(table.n()), "input");
  }
  EstimationReport r;
  r.mode = ScoreMode::Estimated;
  r.n_input = table.n();
  detail::echo_config(r, config, seed);

  const auto split = detail::staged("split", [&] { return split_sample(table, seed); });
  r.split_attempts = split.attempts;
  const auto fit = detail::staged("fit", [&] { return fit_mle(split.fit_half, config.link, config.mle); });
  r.fit = FitSummary{fit.theta, fit.vtheta, fit.loglik, fit.iterations, fit.grad_sup_norm, split.fit_half.n()};

  const auto& est = split.estimate_half;
  const Eigen::MatrixXd design = est.design();
  const auto scores = detail::staged("predict", [&] { return predict(fit, design); });
  const double theta_scale = static_cast<double>(est.n()) / static_cast<double>(split.fit_half.n());
  const FittedIndex fitted{&design, &fit.theta, &fit.vtheta, fit.link, theta_scale};
  detail::estimate_on_scores(r, est, scores, config, fitted);
  return r;
}

/// Known-score pipeline: no splitting or fitting; theta-terms are zero.
inline EstimationReport run_known_score_pipeline(const ObservationTable& table, std::span<const double> scores,
                                                 const PipelineConfig& config, std::uint64_t seed = 0) {
  detail::staged("config", [&] {
    config.validate();
    return 0;
  });
  if (scores.size() != table.n()) {
    throw Error(ErrorKind::LengthMismatch, "score column has " + std::to_string(scores.size()) + " rows, table has " +
                                               std::to_string(table.n()), "input");
  }
  for (double p : scores) {
    if (!(p > 0.0 && p < 1.0)) throw Error(ErrorKind::NonFiniteValue, "known scores must lie in (0, 1)", "input");
  }
  if (table.n() < 2) throw Error(ErrorKind::TooSmall, "known-score mode needs n >= 2", "input");
  EstimationReport r;
  r.mode = ScoreMode::Known;
  r.n_input = table.n();
  detail::echo_config(r, config, seed);
  detail::estimate_on_scores(r, table, scores, config, std::nullopt);
  return r;
}

}  // namespace caliper
