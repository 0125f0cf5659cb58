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

#include <cmath>

#include "caliper/dgp.hpp"
#include "caliper/experiments.hpp"

using namespace caliper;

TEST(AdmissibleDgp, Validation) {
  auto g = AdmissibleDgp::homogeneous();
  EXPECT_NO_THROW(g.validate());
  g.theta0 = Eigen::Vector2d::Zero();
  EXPECT_THROW(g.validate(), Error);
  g.theta0 = Eigen::Vector2d(1.0, 0.0);
  EXPECT_THROW(g.validate(), Error);
  g = AdmissibleDgp::homogeneous();
  g.theta0 = Eigen::Vector3d(1.0, -1.0, 0.5);
  EXPECT_THROW(g.validate(), Error);
  g = AdmissibleDgp::homogeneous();
  g.noise = NoiseSpec::heteroskedastic(0.3, -1.0);
  EXPECT_THROW(g.validate(), Error);
  g.noise = NoiseSpec::heteroskedastic(0.3, 0.3, 0);
  EXPECT_THROW(g.validate(), Error);
  g.noise = NoiseSpec::heteroskedastic(0.3, 0.3, 1);
  EXPECT_NO_THROW(g.validate());
}

TEST(AdmissibleDgp, SupportAndBoundedness) {
  const auto g = AdmissibleDgp::homogeneous();
  const auto [lo, hi] = g.score_range();
  EXPECT_GT(lo, 0.0);
  EXPECT_LT(hi, 1.0);
  const auto s = draw_sample(g, 5000, 3);
  for (std::size_t i = 0; i < 5000; ++i) {
    EXPECT_GE(s.scores[i], lo - 1e-12);
    EXPECT_LE(s.scores[i], hi + 1e-12);
    EXPECT_LT(std::fabs(s.table.y()[i]), 10.0);
  }
  const auto box = [] {
    AdmissibleDgp u;
    u.covariates = CovariateLaw::unit_box(2);
    return u;
  }();
  EXPECT_NEAR(box.score_range().first, 1.0 / (1.0 + std::exp(1.0)), 1e-15);
  EXPECT_NEAR(box.score_range().second, 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
}

TEST(DrawSample, NoiselessConstantEffect) {
  auto g = AdmissibleDgp::homogeneous();
  g.noise = NoiseSpec::none();
  const auto s = draw_sample(g, 500, 8);
  for (std::size_t i = 0; i < 500; ++i) {
    const Eigen::VectorXd x = s.table.x().row(static_cast<Eigen::Index>(i)).transpose();
    const double t = g.theta0.dot(x);
    EXPECT_NEAR(g.m1(x.data(), t) - g.m0(x.data(), t), 1.0, 1e-12);
    const double expect = s.table.d()[i] ? g.m1(x.data(), t) : g.m0(x.data(), t);
    EXPECT_EQ(s.table.y()[i], expect);
  }
}

TEST(DrawSample, Determinism) {
  const auto g = AdmissibleDgp::heterogeneous();
  const auto a = draw_sample(g, 300, 77);
  const auto b = draw_sample(g, 300, 77);
  const auto c = draw_sample(g, 300, 78);
  EXPECT_TRUE(std::equal(a.table.y().begin(), a.table.y().end(), b.table.y().begin()));
  EXPECT_TRUE(std::equal(a.table.d().begin(), a.table.d().end(), b.table.d().begin()));
  EXPECT_EQ(a.table.x(), b.table.x());
  EXPECT_EQ(a.scores, b.scores);
  EXPECT_NE(a.scores, c.scores);
}

TEST(TrueEffects, ConstantAndLinearEffects) {
  const auto hom = AdmissibleDgp::homogeneous();
  EXPECT_EQ(hom.tau(), 1.0);
  EXPECT_EQ(true_tau_t(hom, 1000, 1), 1.0);
  AdmissibleDgp box;
  box.covariates = CovariateLaw::unit_box(2);
  box.m1 = RegressionFn::linear(0.0, Eigen::Vector2d(2.0, 1.0));
  EXPECT_NEAR(box.tau(), 0.5, 1e-15);
  // pi increases in x1, so the treated have larger x1 on average.
  EXPECT_GT(true_tau_t(box, 200000, 2), 0.5);
  const auto e = true_effects(box, 100000, 3);
  EXPECT_NEAR(e.tau, 0.5, 1e-15);
  EXPECT_NEAR(e.tau_t, true_tau_t(box, 1000000, 4), 4 * e.mc_se.tau_t + 1e-3);
  EXPECT_THROW(true_effects(hom, 100, 1), Error);
}

TEST(TrueEffects, HomogeneousOracleValues) {
  const auto e = true_effects(AdmissibleDgp::homogeneous(), 200000, 5);
  EXPECT_NEAR(e.tau, 1.0, 1e-12);
  EXPECT_NEAR(e.tau_t, 1.0, 1e-12);
  EXPECT_NEAR(e.v_tau, 0.0, 1e-12);
  EXPECT_GE(e.theta_term, 0.0);
  EXPECT_NEAR(e.v_total_ate_estimated, e.v_total_ate + e.theta_term, 1e-12);
  EXPECT_LE(e.v_eff, e.v_total_ate + 2 * e.mc_se.v_total_ate);
  EXPECT_LE(std::fabs(e.gap_eff_loss), 2 * e.mc_se.gap_eff_loss + 1e-12);
  EXPECT_EQ(e.batches, 20u);
}

TEST(TrueEffects, SingleIndexEfficiency) {
  const auto e = true_effects(AdmissibleDgp::single_index(), 200000, 6);
  EXPECT_LE(std::fabs(e.v_total_ate - e.v_eff), 2 * std::hypot(e.mc_se.v_total_ate, e.mc_se.v_eff));
  const auto h = true_effects(AdmissibleDgp::single_index(0.5), 200000, 7);
  EXPECT_LE(std::fabs(h.gap_eff_loss), 2 * h.mc_se.gap_eff_loss + 1e-12);
  EXPECT_GT(h.eff_loss_att, 0.0);
}

TEST(TrueEffects, ConditionalMeanMatchesSingleIndexForm) {
  const auto g = AdmissibleDgp::single_index();
  for (double p : {0.3, 0.4, 0.5, 0.6, 0.7}) {
    const double t = g.link.inverse(p);
    EXPECT_NEAR(conditional_mean(g, 0, p), t + 0.5 * t * t, 1e-12);
    EXPECT_NEAR(conditional_mean(g, 1, p), 1.0 + t + 0.5 * t * t, 1e-12);
  }
  const auto hom = AdmissibleDgp::homogeneous();
  EXPECT_THROW(conditional_mean(hom, 0, 0.999), Error);
}

TEST(CoverageExperiment, SingleRepAndNoiseless) {
  const auto one = coverage_experiment(AdmissibleDgp::homogeneous(), 500, 1, 0.05, ScoreMode::Estimated, 9);
  EXPECT_EQ(one.rows.size(), 1u);
  EXPECT_EQ(one.reps, 1u);
  auto g = AdmissibleDgp::homogeneous();
  g.m0 = RegressionFn::linear(0.0, Eigen::Vector2d::Zero());
  g.m1 = RegressionFn::linear(1.0, Eigen::Vector2d::Zero());
  g.noise = NoiseSpec::none();
  const auto s = coverage_experiment(g, 1000, 20, 0.05, ScoreMode::Known, 10);
  EXPECT_EQ(s.completed, 20u);
  EXPECT_EQ(s.coverage_ate, 1.0);
  EXPECT_EQ(s.coverage_att, 1.0);
  EXPECT_THROW(coverage_experiment(g, 1000, 0, 0.05, ScoreMode::Known, 10), Error);
}

TEST(CoverageExperiment, SamplingDistributionAndVarianceOrdering) {
  const auto s = coverage_experiment(AdmissibleDgp::homogeneous(), 4000, 400, 0.05, ScoreMode::Estimated, 11);
  ASSERT_EQ(s.completed, 400u);
  double mean = 0;
  for (const auto& r : s.rows) mean += r.tau_hat;
  mean /= 400.0;
  double m2 = 0, m3 = 0, m4 = 0;
  for (const auto& r : s.rows) {
    const double e = r.tau_hat - mean;
    m2 += e * e;
    m3 += e * e * e;
    m4 += e * e * e * e;
  }
  m2 /= 400.0;
  m3 /= 400.0;
  m4 /= 400.0;
  EXPECT_LE(std::fabs(m3 / std::pow(m2, 1.5)), 0.3);
  EXPECT_LE(std::fabs(m4 / (m2 * m2) - 3.0), 0.6);
  EXPECT_GE(s.mean_v_ate, s.mean_v_known_ate);
  EXPECT_GT(s.mean_theta_term, 0.0);
  for (const auto& r : s.rows) EXPECT_GE(r.v_ate, r.v_known_ate);
}

TEST(GrowthExperiment, EmptyAndDataDependent) {
  EXPECT_TRUE(matches_growth_experiment(AdmissibleDgp::homogeneous(), {}, 5, CaliperRule::fixed(1.0), 1).empty());
  const auto rows = matches_growth_experiment(AdmissibleDgp::homogeneous(), {200, 800}, 20,
                                              CaliperRule::data_dependent(), 2);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.violations, 0u);
    EXPECT_EQ(r.completed, 20u);
    EXPECT_EQ(r.frac_min_ge1, 1.0);
  }
  EXPECT_TRUE(growth_verdict(rows, CaliperRule::data_dependent()).pass);
  EXPECT_THROW(matches_growth_experiment(AdmissibleDgp::homogeneous(), {800, 200}, 5, CaliperRule::fixed(1.0), 1),
               Error);
}
