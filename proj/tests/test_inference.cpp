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
#include <gtest/gtest.h>

#include <boost/math/distributions/normal.hpp>
#include <cmath>

#include "caliper/dgp.hpp"
#include "caliper/inference.hpp"
#include "caliper/report_json.hpp"

using namespace caliper;

namespace {

const std::vector<int> kT6d{1, 0, 0, 1, 0, 1};
const std::vector<double> kT6p{0.30, 0.32, 0.40, 0.42, 0.55, 0.56};
const std::vector<double> kT6y{2.0, 1.0, 1.5, 2.5, 2.0, 3.5};

ObservationTable t6_table() { return {kT6y, kT6d, Eigen::MatrixXd(6, 0)}; }

ObservationTable fixture40() {
  const auto s = draw_sample(AdmissibleDgp::homogeneous(), 40, 40);
  const auto& t = s.table;
  return {std::vector<double>(t.y().begin(), t.y().end()), std::vector<int>(t.d().begin(), t.d().end()), t.x(), true};
}

}  // namespace

TEST(CriticalValue, MatchesReferenceQuantile) {
  const boost::math::normal_distribution<double> normal;
  for (double a : {1e-8, 1e-4, 0.001, 0.01, 0.05, 0.1, 0.2, 0.5, 0.9, 0.999}) {
    EXPECT_NEAR(critical_value(a), boost::math::quantile(normal, 1.0 - a / 2.0), 1e-9) << a;
  }
  EXPECT_NEAR(critical_value(0.05), 1.959964, 1e-6);
  for (double a : {0.0, 1.0, 1.5, -0.1, double(NAN)}) {
    try {
      critical_value(a);
      FAIL() << a;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::BadAlpha);
    }
  }
}

TEST(ConfidenceInterval, SpecExamples) {
  const auto ci = confidence_interval(1.0, 4.0, 400, 0.05);
  EXPECT_NEAR(ci.lo, 0.80400, 5e-6);
  EXPECT_NEAR(ci.hi, 1.19600, 5e-6);
  EXPECT_NEAR(ci.center(), 1.0, 1e-15);
  EXPECT_TRUE(ci.contains(1.1));
  const auto zero = confidence_interval(2.5, 0.0, 10, 0.05);
  EXPECT_EQ(zero.lo, 2.5);
  EXPECT_EQ(zero.hi, 2.5);
  EXPECT_THROW(confidence_interval(1.0, 1.0, 10, 1.5), Error);
  EXPECT_THROW(confidence_interval(1.0, 1.0, 0, 0.05), Error);
  EXPECT_THROW(confidence_interval(1.0, -1.0, 10, 0.05), Error);
}

TEST(ConfidenceInterval, WidthScalesWithRootN) {
  for (std::size_t n : {10u, 100u, 1000u, 12345u}) {
    const double w1 = confidence_interval(0.0, 3.0, n, 0.1).halfwidth();
    const double w4 = confidence_interval(0.0, 3.0, 4 * n, 0.1).halfwidth();
    EXPECT_NEAR(w1 / w4, 2.0, 1e-12);
    EXPECT_NEAR(w1, critical_value(0.1) * std::sqrt(3.0 / static_cast<double>(n)), 1e-14);
  }
}

TEST(Pipeline, KnownScoreT6) {
  PipelineConfig c;
  c.delta = 0.05;
  const auto r = run_known_score_pipeline(t6_table(), kT6p, c, 7);
  EXPECT_NEAR(r.estimates.tau_hat, 7.0 / 6.0, 1e-15);
  EXPECT_NEAR(r.estimates.tau_t_hat, 7.0 / 6.0, 1e-15);
  EXPECT_EQ(r.mode, ScoreMode::Known);
  EXPECT_EQ(r.variance.theta_term, 0.0);
  EXPECT_EQ(r.variance.theta_term_t, 0.0);
  EXPECT_EQ(r.caliper_rule, "explicit");
  EXPECT_EQ(r.n_estimation, 6u);
  EXPECT_FALSE(r.fit.has_value());
  EXPECT_GE(r.ci_ate.halfwidth(), 0.0);
}

TEST(Pipeline, TooSmallAndStageLabels) {
  const auto s = draw_sample(AdmissibleDgp::homogeneous(), 6, 1);
  try {
    run_pipeline(s.table, {}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::TooSmall);
    EXPECT_EQ(e.stage(), "input");
  }
  PipelineConfig bad;
  bad.alpha = 2.0;
  try {
    run_pipeline(fixture40(), bad, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::BadAlpha);
    EXPECT_EQ(e.stage(), "config");
  }
  PipelineConfig tiny;
  tiny.delta = 1e-9;
  tiny.bandwidths.kappa0_score = 1e-7;
  try {
    run_known_score_pipeline(t6_table(), kT6p, tiny);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.stage(), "variance");
  }
  try {
    run_known_score_pipeline(t6_table(), std::vector<double>{0.5, 0.5}, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::LengthMismatch);
  }
  EXPECT_THROW(run_known_score_pipeline(t6_table(), std::vector<double>{0.3, 0.3, 0.3, 0.3, 0.3, 1.0}, {}), Error);
}

TEST(Pipeline, EstimatedModeOnFixture) {
  const auto table = fixture40();
  const auto r = run_pipeline(table, {}, 99);
  EXPECT_EQ(r.mode, ScoreMode::Estimated);
  EXPECT_EQ(r.n_input, 40u);
  ASSERT_TRUE(r.fit.has_value());
  EXPECT_EQ(r.n_estimation + r.fit->n_fit, 40u);
  EXPECT_GE(r.variance.theta_term, 0.0);
  EXPECT_NEAR(r.variance.theta_scale, static_cast<double>(r.n_estimation) / static_cast<double>(r.fit->n_fit), 1e-15);
  EXPECT_NEAR(r.ci_ate.halfwidth(),
              critical_value(0.05) * std::sqrt(r.variance.v_total_ate / static_cast<double>(r.n_estimation)), 1e-14);
  EXPECT_EQ(r.caliper_rule, "data_dependent");
  EXPECT_EQ(r.seed, 99u);
}

TEST(Pipeline, ReportIsDeterministic) {
  const auto table = fixture40();
  PipelineConfig c1;
  PipelineConfig c8;
  c8.threads = 8;
  const auto a = report_to_string(run_pipeline(table, c1, 2024));
  const auto b = report_to_string(run_pipeline(table, c1, 2024));
  const auto c = report_to_string(run_pipeline(table, c8, 2024));
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
  EXPECT_NE(a, report_to_string(run_pipeline(table, c1, 2025)));
}

TEST(ReportJson, RoundTrip) {
  const auto r = run_pipeline(fixture40(), {}, 5);
  const auto text = report_to_string(r);
  const auto back = report_from_string(text);
  EXPECT_EQ(report_to_string(back), text);
  const auto j = nlohmann::json::parse(text);
  EXPECT_EQ(j.at("schema"), kReportSchema);
  EXPECT_TRUE(j.contains("config"));
  try {
    report_from_string(R"({"schema":"other/9"})");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::SchemaMismatch);
  }
}
