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
#include <numeric>

#include "caliper/dgp.hpp"
#include "caliper/estimators.hpp"
#include "caliper/propensity.hpp"
#include "caliper/variance.hpp"

using namespace caliper;

namespace {

struct Fitted {
  DrawnSample sample;
  Eigen::MatrixXd design;
  PropensityFit fit;
  std::vector<double> scores;
  Eigen::VectorXd index;
  ResolvedBandwidths bw;
};

Fitted fitted_sample(const AdmissibleDgp& dgp, std::size_t n, std::uint64_t seed) {
  Fitted f{draw_sample(dgp, n, seed), {}, PropensityFit{}, {}, {}, {}};
  f.design = f.sample.table.design();
  f.fit = fit_mle(f.design, f.sample.table.d(), dgp.link);
  f.scores = predict(f.fit, f.design);
  f.index = f.design * f.fit.theta;
  f.bw = resolve_bandwidths({}, n, f.scores, std::span<const double>(f.index.data(), n));
  return f;
}

double rel(double a, double b) { return std::fabs(a - b) / std::max(1.0, std::fabs(b)); }

}  // namespace

TEST(GaussianKernel, SpecValues) {
  const auto k0 = gaussian_kernel(0.0);
  EXPECT_NEAR(k0.k, 0.3989422804014327, 1e-16);
  EXPECT_EQ(k0.kprime, 0.0);
  const auto k1 = gaussian_kernel(1.0);
  EXPECT_NEAR(k1.k, 0.24197072451914337, 1e-16);
  EXPECT_DOUBLE_EQ(k1.kprime, -k1.k);
  EXPECT_DOUBLE_EQ(gaussian_kernel(-2.5).kprime, 2.5 * gaussian_kernel(2.5).k);
}

TEST(GroupKernelSum, HandSums) {
  const double gamma = 0.1;
  const std::vector<double> z{0.4};
  const std::vector<double> y{3.0};
  const std::vector<int> d{0};
  EXPECT_NEAR(group_kernel_sum(z, y, d, 0, 0.4, gamma, KernelWeight::One, false), gaussian_kernel(0).k / gamma, 1e-14);
  EXPECT_EQ(group_kernel_sum(z, y, d, 0, 0.4, gamma, KernelWeight::One, true), 0.0);
  const std::vector<double> z2{0.5 - gamma, 0.5 + gamma};
  const std::vector<double> y2{1.0, 1.0};
  const std::vector<int> d2{1, 1};
  EXPECT_NEAR(group_kernel_sum(z2, y2, d2, 1, 0.5, gamma, KernelWeight::Y, false), gaussian_kernel(1).k / gamma, 1e-13);
  EXPECT_THROW(group_kernel_sum(z, y, d, 1, 0.4, gamma, KernelWeight::One, false), Error);
  EXPECT_THROW(group_kernel_sum(z, y, d, 0, 0.4, 0.0, KernelWeight::One, false), Error);
}

TEST(KernelRegression, SingleUnitAndConstantOutcomes) {
  const std::vector<double> p{0.4, 0.6};
  const std::vector<double> y{3.0, 7.0};
  const std::vector<int> d{0, 1};
  ResolvedBandwidths bw;
  bw.gamma_score = 0.05;
  const KernelRegression kr(y, d, p, bw);
  EXPECT_NEAR(kr.mu(0, 0.4), 3.0, 1e-15);
  EXPECT_EQ(kr.sigma2(0, 0.4).value, 0.0);
  EXPECT_NEAR(kr.mu(1, 0.55), 7.0, 1e-15);

  std::vector<double> pc(200), yc(200);
  std::vector<int> dc(200);
  Rng rng(3);
  for (std::size_t i = 0; i < 200; ++i) {
    pc[i] = rng.uniform(0.2, 0.8);
    dc[i] = static_cast<int>(i % 2);
    yc[i] = dc[i] ? 2.5 : -1.75;
  }
  bw.gamma_score = 0.04;
  const KernelRegression kc(yc, dc, pc, bw);
  for (double at = 0.2; at <= 0.8; at += 0.01) {
    for (int g = 0; g < 2; ++g) {
      EXPECT_NEAR(kc.mu(g, at), g ? 2.5 : -1.75, 1e-13);
      EXPECT_NEAR(kc.sigma2(g, at).value, 0.0, 1e-12);
      EXPECT_NEAR(kc.dmu_dp(g, at), 0.0, 1e-9);
    }
  }
}

TEST(KernelRegression, DensityFloor) {
  const std::vector<double> p{0.1, 0.2};
  const std::vector<double> y{1.0, 2.0};
  const std::vector<int> d{0, 1};
  ResolvedBandwidths bw;
  bw.gamma_score = 0.001;
  const KernelRegression kr(y, d, p, bw);
  try {
    kr.mu(0, 0.9);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DensityFloor);
  }
}

TEST(KernelRegression, FastPathMatchesDirectSums) {
  const auto f = fitted_sample(AdmissibleDgp::homogeneous(), 3000, 11);
  const auto y = f.sample.table.y();
  const auto d = f.sample.table.d();
  const double g = f.bw.gamma_score;
  const KernelRegression kr(y, d, f.scores, f.design, f.fit.theta, Link::logit(), f.bw);
  const std::span<const double> z(f.index.data(), f.scores.size());
  for (std::size_t i = 0; i < 3000; i += 97) {
    const double at = f.scores[i];
    for (int grp = 0; grp < 2; ++grp) {
      const auto m = kr.moments(grp, at);
      EXPECT_LT(rel(m.h, group_kernel_sum(f.scores, y, d, grp, at, g, KernelWeight::One, false)), 1e-10);
      EXPECT_LT(rel(m.q, group_kernel_sum(f.scores, y, d, grp, at, g, KernelWeight::Y, false)), 1e-10);
      EXPECT_LT(rel(m.q2, group_kernel_sum(f.scores, y, d, grp, at, g, KernelWeight::Y2, false)), 1e-10);
      EXPECT_LT(rel(m.dh, group_kernel_sum(f.scores, y, d, grp, at, g, KernelWeight::One, true)), 1e-10);
      EXPECT_LT(rel(m.dq, group_kernel_sum(f.scores, y, d, grp, at, g, KernelWeight::Y, true)), 1e-10);
      // Theta-derivative from direct index-space sums.
      const double t = Link::logit().inverse(at);
      const double inv = Link::logit().inverse_derivative(at);
      const auto dmt = kr.dmu_dtheta(grp, at);
      for (std::size_t c = 0; c < 2; ++c) {
        const double dh = group_kernel_sum(z, y, d, grp, t, f.bw.gamma_index, KernelWeight::X, true, &f.design, c);
        const double dq = group_kernel_sum(z, y, d, grp, t, f.bw.gamma_index, KernelWeight::YX, true, &f.design, c);
        const double expect = inv * (dq * m.h - m.q * dh) / (m.h * m.h);
        EXPECT_LT(rel(dmt(static_cast<Eigen::Index>(c)), expect), 1e-10);
      }
    }
  }
}

TEST(KernelRegression, ReorderingInvariance) {
  const auto f = fitted_sample(AdmissibleDgp::heterogeneous(), 1500, 12);
  const auto n = f.scores.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::vector<double> p2(n), y2(n);
  std::vector<int> d2(n);
  Eigen::MatrixXd x2(f.design.rows(), f.design.cols());
  for (std::size_t i = 0; i < n; ++i) {
    p2[i] = f.scores[perm[i]];
    y2[i] = f.sample.table.y()[perm[i]];
    d2[i] = f.sample.table.d()[perm[i]];
    x2.row(static_cast<Eigen::Index>(i)) = f.design.row(static_cast<Eigen::Index>(perm[i]));
  }
  const KernelRegression a(f.sample.table.y(), f.sample.table.d(), f.scores, f.design, f.fit.theta, Link::logit(), f.bw);
  const KernelRegression b(y2, d2, p2, x2, f.fit.theta, Link::logit(), f.bw);
  for (std::size_t i = 0; i < n; i += 50) {
    for (int g = 0; g < 2; ++g) {
      const double at = f.scores[i];
      EXPECT_LT(rel(a.mu(g, at), b.mu(g, at)), 1e-12);
      EXPECT_LT(rel(a.sigma2(g, at).value, b.sigma2(g, at).value), 1e-12);
      EXPECT_LT((a.lambda(g, f.design.row(static_cast<Eigen::Index>(i)).transpose()) -
                 b.lambda(g, f.design.row(static_cast<Eigen::Index>(i)).transpose()))
                    .lpNorm<Eigen::Infinity>(),
                1e-10);
    }
  }
}

TEST(KernelRegression, DerivativesMatchFiniteDifferences) {
  const auto f = fitted_sample(AdmissibleDgp::heterogeneous(), 20000, 13);
  const auto y = f.sample.table.y();
  const auto d = f.sample.table.d();
  const KernelRegression kr(y, d, f.scores, f.design, f.fit.theta, Link::logit(), f.bw);
  const double h = 1e-5;
  for (double at : {0.35, 0.45, 0.5, 0.55, 0.65}) {
    for (int g = 0; g < 2; ++g) {
      // p-derivative of the score-space ratio.
      const double fd = (kr.mu(g, at + h) - kr.mu(g, at - h)) / (2 * h);
      EXPECT_LE(std::fabs(kr.dmu_dp(g, at) - fd), 1e-3 * std::max(1.0, std::fabs(fd))) << at << " " << g;
      // theta-derivative sums of the index-space kernel at fixed t.
      const double t = Link::logit().inverse(at);
      GroupSmoother sm(std::span<const double>(f.index.data(), f.scores.size()), y, d, g, f.bw.gamma_index, true,
                       &f.design);
      std::vector<double> dh(2), dq(2);
      sm.derivative_sums(t, dh, dq);
      for (Eigen::Index c = 0; c < 2; ++c) {
        Eigen::VectorXd tp = f.fit.theta, tq = f.fit.theta;
        tp(c) += h;
        tq(c) -= h;
        const Eigen::VectorXd zp = f.design * tp, zm = f.design * tq;
        const std::span<const double> sp(zp.data(), y.size()), sm2(zm.data(), y.size());
        const auto sum = [&](std::span<const double> z, KernelWeight w) {
          return group_kernel_sum(z, y, d, g, t, f.bw.gamma_index, w, false);
        };
        const double fd_h = (sum(sp, KernelWeight::One) - sum(sm2, KernelWeight::One)) / (2 * h);
        const double fd_q = (sum(sp, KernelWeight::Y) - sum(sm2, KernelWeight::Y)) / (2 * h);
        const auto cc = static_cast<std::size_t>(c);
        EXPECT_LE(std::fabs(dh[cc] - fd_h), 1e-3 * std::max(1.0, std::fabs(fd_h)));
        EXPECT_LE(std::fabs(dq[cc] - fd_q), 1e-3 * std::max(1.0, std::fabs(fd_q)));
      }
    }
  }
}

TEST(KernelRegression, LambdaVanishesForConstantOutcomes) {
  auto f = fitted_sample(AdmissibleDgp::homogeneous(), 2000, 14);
  std::vector<double> y(f.scores.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f.sample.table.d()[i] ? 4.0 : -2.0;
  const KernelRegression kr(y, f.sample.table.d(), f.scores, f.design, f.fit.theta, Link::logit(), f.bw);
  for (std::size_t i = 0; i < y.size(); i += 37) {
    const Eigen::VectorXd x = f.design.row(static_cast<Eigen::Index>(i)).transpose();
    for (int g = 0; g < 2; ++g) {
      EXPECT_LT(kr.lambda(g, x).lpNorm<Eigen::Infinity>(), 1e-8);
      EXPECT_NEAR(kr.mu(g, f.scores[i]), g ? 4.0 : -2.0, 1e-12);
    }
  }
  try {
    kr.lambda(0, Eigen::VectorXd::Ones(3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DimensionMismatch);
  }
  const KernelRegression score_only(y, f.sample.table.d(), f.scores, f.bw);
  EXPECT_THROW(score_only.lambda(0, Eigen::VectorXd::Ones(2)), Error);
}

TEST(KernelRegression, MuErrorShrinksWithN) {
  const auto dgp = AdmissibleDgp::homogeneous();
  const auto sup_error = [&](std::size_t n, std::uint64_t seed) {
    const auto s = draw_sample(dgp, n, seed);
    const auto bw = resolve_bandwidths({}, n, s.scores);
    const KernelRegression kr(s.table.y(), s.table.d(), s.scores, bw);
    const auto w = truncation_window(s.scores, bw.a_n);
    double worst = 0;
    for (int i = 0; i < 25; ++i) {
      const double p = w.lo + (w.hi - w.lo) * i / 24.0;
      for (int g = 0; g < 2; ++g) worst = std::max(worst, std::fabs(kr.mu(g, p) - conditional_mean(dgp, g, p)));
    }
    return worst;
  };
  double small = 0, large = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    small += sup_error(2000, 15 + seed);
    large += sup_error(50000, 25 + seed);
  }
  EXPECT_LT(large, 0.6 * small);
}

TEST(Bandwidths, ResolutionAndValidation) {
  const std::vector<double> s{0.2, 0.4, 0.6, 0.8};
  KernelBandwidths bw;
  bw.kappa0_score = 1.0;
  const auto r = resolve_bandwidths(bw, 10000, s);
  EXPECT_NEAR(r.gamma_score, std::pow(10000.0, -1.0 / 4.25), 1e-15);
  EXPECT_NEAR(r.a_n, 0.1 * std::pow(10000.0, -1.0 / 4.5), 1e-15);
  const auto r2 = resolve_bandwidths({}, 4, s);
  EXPECT_NEAR(r2.kappa0_score, std::sqrt(0.05), 1e-15);
  KernelBandwidths bad;
  bad.alpha = 0.3;
  EXPECT_THROW(bad.validate(), Error);
  bad = {};
  bad.beta = bad.alpha;
  EXPECT_THROW(bad.validate(), Error);
  bad = {};
  bad.kappa1 = 0;
  EXPECT_THROW(bad.validate(), Error);
  bad = {};
  bad.kappa0_index = -1;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(TruncationWindow, BoundsAndDegeneracy) {
  const std::vector<double> s{0.2, 0.3, 0.5, 0.7, 0.8};
  const auto w = truncation_window(s, 0.1);
  EXPECT_NEAR(w.lo, 0.3, 1e-15);
  EXPECT_NEAR(w.hi, 0.7, 1e-15);
  EXPECT_GE(w.n_hat, 1u);
  EXPECT_LE(w.n_hat, s.size());
  try {
    truncation_window(s, 0.6);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateWindow);
  }
}

TEST(VarianceComponents, KnownModeAndInvariants) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const auto dgp = seed % 2 ? AdmissibleDgp::heterogeneous() : AdmissibleDgp::homogeneous();
    const auto f = fitted_sample(dgp, 2000 + 500 * seed, 100 + seed);
    const auto& t = f.sample.table;
    const double delta = caliper_value(CaliperRule::data_dependent(), f.scores, t.d());
    const auto idx = build_match_index(f.scores, t.d(), delta);
    const auto est = point_estimates(t, idx);
    const auto known = variance_components(t, nullptr, idx, est, {});
    EXPECT_EQ(known.theta_term, 0.0);
    EXPECT_EQ(known.theta_term_t, 0.0);
    EXPECT_FALSE(known.estimated_scores);
    const auto r = variance_components(t, &f.fit, idx, est, {});
    EXPECT_TRUE(r.estimated_scores);
    EXPECT_GE(r.theta_term, 0.0);
    EXPECT_GE(r.theta_term_t, 0.0);
    EXPECT_GE(r.raw_theta_term, -1e-12);
    EXPECT_DOUBLE_EQ(r.v_total_ate, r.v_tau + r.v_sigma_pi + r.theta_term);
    EXPECT_GE(r.v_total_ate, 0.0);
    EXPECT_GE(r.v_total_att, 0.0);
    EXPECT_LE(r.n_hat, r.n);
    EXPECT_EQ(r.v_tau, known.v_tau);
    EXPECT_EQ(r.v_sigma_pi, known.v_sigma_pi);
    EXPECT_EQ(r.clamped.v_tau, r.raw_v_tau < 0);
  }
}

TEST(VarianceComponents, ThreadCountDoesNotChangeResult) {
  const auto f = fitted_sample(AdmissibleDgp::heterogeneous(), 3000, 21);
  const auto& t = f.sample.table;
  const auto idx = build_match_index(f.scores, t.d(), caliper_value(CaliperRule::data_dependent(), f.scores, t.d()));
  const auto est = point_estimates(t, idx);
  const auto a = variance_components(t, &f.fit, idx, est, {}, 1);
  const auto b = variance_components(t, &f.fit, idx, est, {}, 4);
  EXPECT_EQ(a.v_total_ate, b.v_total_ate);
  EXPECT_EQ(a.v_total_att, b.v_total_att);
  EXPECT_EQ(a.theta_term, b.theta_term);
}

TEST(VarianceComponents, NoiselessConstantEffectIsNearZero) {
  auto dgp = AdmissibleDgp::homogeneous();
  dgp.m0 = RegressionFn::linear(0.5, Eigen::Vector2d::Zero());
  dgp.m1 = RegressionFn::linear(1.5, Eigen::Vector2d::Zero());
  dgp.noise = NoiseSpec::none();
  const auto s = draw_sample(dgp, 20000, 5);
  const auto idx = build_match_index(s.scores, s.table.d(), caliper_value(CaliperRule::data_dependent(), s.scores, s.table.d()));
  const auto est = point_estimates(s.table, idx);
  EXPECT_NEAR(est.tau_hat, 1.0, 1e-12);
  const auto fit = fit_mle(s.table.design(), s.table.d(), dgp.link);
  const auto r = variance_components(s.table, &fit, idx, est, {});
  EXPECT_NEAR(r.v_tau, 0.0, 1e-8);
  EXPECT_NEAR(r.v_sigma_pi, 0.0, 1e-8);
  EXPECT_NEAR(r.theta_term, 0.0, 1e-8);
  EXPECT_NEAR(r.v_total_ate, 0.0, 1e-8);
}

TEST(VarianceComponents, Errors) {
  const std::vector<double> y{1, 2, 3, 4};
  const std::vector<int> d{0, 1, 0, 1};
  const std::vector<double> p{0.3, 0.4, 0.5, 0.6};
  PointEstimates est;
  KernelBandwidths bw;
  bw.kappa1 = 10.0;
  try {
    variance_components(y, d, p, est, bw);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateWindow);
  }
  EXPECT_THROW(variance_components(y, std::vector<int>{0, 1}, p, est, {}), Error);
  KernelBandwidths tiny;
  tiny.kappa0_score = 1e-6;
  tiny.kappa1 = 1e-6;
  try {
    variance_components(y, d, p, est, tiny);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DensityFloor);
  }
}
