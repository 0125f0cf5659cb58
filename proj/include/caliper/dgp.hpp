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

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "caliper/core_data.hpp"
#include "caliper/error.hpp"
#include "caliper/normal.hpp"
#include "caliper/parallel.hpp"
#include "caliper/propensity.hpp"
#include "caliper/random.hpp"

namespace caliper {

/// X = A U + b with U uniform on the unit cube [0,1]^K.
struct CovariateLaw {
  Eigen::MatrixXd a;
  Eigen::VectorXd b;

  static CovariateLaw unit_box(std::size_t k) {
    const auto kk = static_cast<Eigen::Index>(k);
    return {Eigen::MatrixXd::Identity(kk, kk), Eigen::VectorXd::Zero(kk)};
  }

  /// Parallelogram on which x1 - x2 is uniform on [-1, 1].
  static CovariateLaw sheared_2d() {
    Eigen::MatrixXd a(2, 2);
    a << 2.0, 1.0, 0.0, 1.0;
    Eigen::VectorXd b(2);
    b << -1.0, 0.0;
    return {a, b};
  }

  std::size_t k() const noexcept { return static_cast<std::size_t>(b.size()); }

  void validate() const {
    if (a.rows() != b.size() || a.cols() != b.size() || b.size() < 2) {
      throw Error(ErrorKind::DimensionMismatch, "covariate law needs a square K x K map with K >= 2");
    }
    if (!a.allFinite() || !b.allFinite() || std::fabs(a.determinant()) < 1e-12) {
      throw Error(ErrorKind::InvalidArgument, "covariate map must be finite and nonsingular");
    }
  }

  Eigen::VectorXd mean() const { return 0.5 * a.rowwise().sum() + b; }

  /// Corner of the support for the vertex with bit pattern `mask`.
  Eigen::VectorXd vertex(std::uint64_t mask) const {
    Eigen::VectorXd u(b.size());
    for (Eigen::Index j = 0; j < u.size(); ++j) u(j) = static_cast<double>((mask >> j) & 1u);
    return a * u + b;
  }
};

/// Regression function m(x) = c + b^T x + sum_j q_j x_j^2, or the single-index
/// form phi(theta0^T x) with phi(t) = c0 + c1 t + c2 t^2.
class RegressionFn {
 public:
  enum class Kind { Linear, AdditiveQuadratic, SingleIndex };

  static RegressionFn linear(double c, Eigen::VectorXd coef) {
    RegressionFn f(Kind::Linear);
    f.c_ = c;
    f.coef_ = std::move(coef);
    f.quad_ = Eigen::VectorXd::Zero(f.coef_.size());
    return f;
  }

  static RegressionFn additive_quadratic(double c, Eigen::VectorXd coef, Eigen::VectorXd quad) {
    if (coef.size() != quad.size()) throw Error(ErrorKind::DimensionMismatch, "linear and quadratic coefficients");
    RegressionFn f(Kind::AdditiveQuadratic);
    f.c_ = c;
    f.coef_ = std::move(coef);
    f.quad_ = std::move(quad);
    return f;
  }

  static RegressionFn single_index(double c0, double c1, double c2 = 0.0) {
    RegressionFn f(Kind::SingleIndex);
    f.phi_ = {c0, c1, c2};
    return f;
  }

  Kind kind() const noexcept { return kind_; }

  /// Value at covariate row `x` whose true index is `t`.
  double operator()(const double* x, double t) const noexcept {
    if (kind_ == Kind::SingleIndex) return phi_[0] + t * (phi_[1] + t * phi_[2]);
    double v = c_;
    for (Eigen::Index j = 0; j < coef_.size(); ++j) v += x[j] * (coef_(j) + quad_(j) * x[j]);
    return v;
  }

  /// Exact E m(X) under `law`.
  double mean(const CovariateLaw& law, const Eigen::VectorXd& theta0) const {
    const Eigen::VectorXd mu = law.mean();
    if (kind_ == Kind::SingleIndex) {
      const Eigen::VectorXd c = law.a.transpose() * theta0;
      const double et = theta0.dot(mu);
      const double et2 = c.squaredNorm() / 12.0 + et * et;
      return phi_[0] + phi_[1] * et + phi_[2] * et2;
    }
    double v = c_ + coef_.dot(mu);
    for (Eigen::Index j = 0; j < quad_.size(); ++j) {
      v += quad_(j) * (law.a.row(j).squaredNorm() / 12.0 + mu(j) * mu(j));
    }
    return v;
  }

  void validate(std::size_t k) const {
    if (kind_ != Kind::SingleIndex && static_cast<std::size_t>(coef_.size()) != k) {
      throw Error(ErrorKind::DimensionMismatch, "regression coefficients need " + std::to_string(k) + " entries");
    }
  }

  /// True when m1 - m0 is a constant, i.e. the two functions differ only in
  /// their intercept.
  static bool differ_by_constant(const RegressionFn& m1, const RegressionFn& m0) {
    if (m1.kind_ == Kind::SingleIndex && m0.kind_ == Kind::SingleIndex) {
      return m1.phi_[1] == m0.phi_[1] && m1.phi_[2] == m0.phi_[2];
    }
    if (m1.kind_ == Kind::SingleIndex || m0.kind_ == Kind::SingleIndex) return false;
    return m1.coef_ == m0.coef_ && m1.quad_ == m0.quad_;
  }

 private:
  explicit RegressionFn(Kind kind) : kind_(kind) {}

  Kind kind_;
  double c_ = 0.0;
  Eigen::VectorXd coef_, quad_;
  std::array<double, 3> phi_{};
};

/// Outcome noise nu = s(x) * eps with s(x) = scale + slope * x[column] and eps
/// either uniform on [-1/2, 1/2] or standard normal truncated to [-trunc, trunc].
struct NoiseSpec {
  enum class Law { None, Uniform, TruncatedNormal };
  Law law = Law::Uniform;
  double scale = 1.0;
  double slope = 0.0;
  std::size_t column = 0;
  double trunc = 2.0;

  static NoiseSpec none() { return {Law::None, 0.0, 0.0, 0, 2.0}; }
  static NoiseSpec uniform(double scale = 1.0) { return {Law::Uniform, scale, 0.0, 0, 2.0}; }
  static NoiseSpec truncated_normal(double scale, double trunc = 2.0) {
    return {Law::TruncatedNormal, scale, 0.0, 0, trunc};
  }
  static NoiseSpec heteroskedastic(double scale, double slope, std::size_t column = 0, Law law = Law::Uniform) {
    return {law, scale, slope, column, 2.0};
  }

  double sd_scale(const double* x) const noexcept { return scale + slope * x[column]; }

  /// Var(eps).
  double base_variance() const noexcept {
    switch (law) {
      case Law::None: return 0.0;
      case Law::Uniform: return 1.0 / 12.0;
      case Law::TruncatedNormal: {
        const double z = 2.0 * normal::cdf(trunc) - 1.0;
        return 1.0 - 2.0 * trunc * normal::pdf(trunc) / z;
      }
    }
    return 0.0;
  }

  double draw(Rng& rng) const {
    switch (law) {
      case Law::None: return 0.0;
      case Law::Uniform: return rng.uniform() - 0.5;
      case Law::TruncatedNormal: {
        const double lo = normal::cdf(-trunc);
        const double hi = normal::cdf(trunc);
        return normal::quantile(lo + (hi - lo) * rng.uniform_open());
      }
    }
    return 0.0;
  }
};

/// Single-index propensity model with bounded outcomes:
///   X = A U + b,  D | X ~ Bernoulli(g(theta0^T X)),  Y^d = m_d(X) + nu_d.
struct AdmissibleDgp {
  CovariateLaw covariates = CovariateLaw::sheared_2d();
  Eigen::VectorXd theta0 = Eigen::Vector2d(1.0, -1.0);
  Link link = Link::logit();
  RegressionFn m0 = RegressionFn::linear(0.0, Eigen::Vector2d(1.0, 1.0));
  RegressionFn m1 = RegressionFn::linear(1.0, Eigen::Vector2d(1.0, 1.0));
  NoiseSpec noise;

  /// m0 = x1 + x2 and m1 = m0 + 1, so tau = tau_t = 1.
  static AdmissibleDgp homogeneous() { return {}; }

  /// m0 = x1 + x2 and m1 = m0 + x1.
  static AdmissibleDgp heterogeneous() {
    AdmissibleDgp g;
    g.m1 = RegressionFn::linear(0.0, Eigen::Vector2d(2.0, 1.0));
    return g;
  }

  /// Outcomes depend on X only through theta0^T X.
  static AdmissibleDgp single_index(double effect_slope = 0.0) {
    AdmissibleDgp g;
    g.m0 = RegressionFn::single_index(0.0, 1.0, 0.5);
    g.m1 = RegressionFn::single_index(1.0, 1.0 + effect_slope, 0.5);
    return g;
  }

  std::size_t k() const noexcept { return covariates.k(); }

  void validate() const {
    covariates.validate();
    if (static_cast<std::size_t>(theta0.size()) != k()) {
      throw Error(ErrorKind::DimensionMismatch, "theta0 needs " + std::to_string(k()) + " entries");
    }
    if (!theta0.allFinite() || (theta0.array() != 0.0).count() < 2) {
      throw Error(ErrorKind::InvalidArgument, "theta0 needs at least two nonzero coordinates");
    }
    m0.validate(k());
    m1.validate(k());
    if (noise.law != NoiseSpec::Law::None) {
      if (noise.column >= k()) throw Error(ErrorKind::DimensionMismatch, "noise column out of range");
      if (noise.law == NoiseSpec::Law::TruncatedNormal && !(noise.trunc > 0.0)) {
        throw Error(ErrorKind::InvalidArgument, "truncation point must be positive");
      }
      for (std::uint64_t v = 0; v < (std::uint64_t{1} << k()); ++v) {
        const Eigen::VectorXd x = covariates.vertex(v);
        if (!(noise.sd_scale(x.data()) > 0.0)) {
          throw Error(ErrorKind::InvalidArgument, "noise scale must stay positive on the support");
        }
      }
    }
  }

  /// Range of theta0^T X over the support.
  std::pair<double, double> index_range() const {
    const Eigen::VectorXd c = covariates.a.transpose() * theta0;
    double lo = theta0.dot(covariates.b), hi = lo;
    for (Eigen::Index j = 0; j < c.size(); ++j) (c(j) < 0 ? lo : hi) += c(j);
    return {lo, hi};
  }

  std::pair<double, double> score_range() const {
    const auto [lo, hi] = index_range();
    return {link(lo), link(hi)};
  }

  double tau() const { return m1.mean(covariates, theta0) - m0.mean(covariates, theta0); }
};

struct DrawnSample {
  ObservationTable table;
  std::vector<double> scores;  ///< true g(theta0^T X_i)
};

/// n i.i.d. draws. Each unit consumes K + 3 uniforms in a fixed order
/// (covariates, treatment, noise for Y^0, noise for Y^1).
inline DrawnSample draw_sample(const AdmissibleDgp& dgp, std::size_t n, std::uint64_t seed) {
  dgp.validate();
  if (n < 1) throw Error(ErrorKind::TooSmall, "draw_sample needs n >= 1");
  const auto k = static_cast<Eigen::Index>(dgp.k());
  Rng rng(seed);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), k);
  std::vector<double> y(n), scores(n);
  std::vector<int> d(n);
  Eigen::VectorXd u(k), xi(k);
  const auto [p_lo, p_hi] = dgp.score_range();
  const double slack = 1e-12;
  for (std::size_t i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) u(j) = rng.uniform();
    xi.noalias() = dgp.covariates.a * u + dgp.covariates.b;
    x.row(static_cast<Eigen::Index>(i)) = xi.transpose();
    const double t = dgp.theta0.dot(xi);
    const double p = dgp.link(t);
    if (!(p >= p_lo - slack && p <= p_hi + slack && p > 0.0 && p < 1.0)) {
      throw Error(ErrorKind::InvalidArgument, "drawn score left the compact support");
    }
    scores[i] = p;
    d[i] = rng.uniform() < p ? 1 : 0;
    const double s = dgp.noise.law == NoiseSpec::Law::None ? 0.0 : dgp.noise.sd_scale(xi.data());
    const double nu0 = s * dgp.noise.draw(rng);
    const double nu1 = s * dgp.noise.draw(rng);
    y[i] = d[i] == 1 ? dgp.m1(xi.data(), t) + nu1 : dgp.m0(xi.data(), t) + nu0;
  }
  std::vector<std::string> names;
  for (Eigen::Index j = 0; j < k; ++j) names.push_back("x" + std::to_string(j + 1));
  return {ObservationTable(std::move(y), std::move(d), std::move(x), false, std::move(names)), std::move(scores)};
}

namespace detail {

/// Gauss-Legendre nodes and weights on [-1, 1].
template <std::size_t N>
struct GaussLegendre {
  std::array<double, N> x{};
  std::array<double, N> w{};

  GaussLegendre() {
    for (std::size_t i = 0; i < (N + 1) / 2; ++i) {
      double z = std::cos(std::numbers::pi * (static_cast<double>(i) + 0.75) / (static_cast<double>(N) + 0.5));
      double dp = 0.0;
      for (int it = 0; it < 100; ++it) {
        double p0 = 1.0, p1 = 0.0;
        for (std::size_t j = 1; j <= N; ++j) {
          const double p2 = p1;
          p1 = p0;
          const double jd = static_cast<double>(j);
          p0 = ((2.0 * jd - 1.0) * z * p1 - (jd - 1.0) * p2) / jd;
        }
        dp = static_cast<double>(N) * (z * p0 - p1) / (z * z - 1.0);
        const double dz = p0 / dp;
        z -= dz;
        if (std::fabs(dz) < 1e-16) break;
      }
      x[i] = -z;
      x[N - 1 - i] = z;
      w[i] = w[N - 1 - i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
  }
};

inline const GaussLegendre<32>& gauss_legendre_32() {
  static const GaussLegendre<32> rule;
  return rule;
}

/// Calls f(x) at quadrature nodes on the segment {u in [0,1]^2 : c^T u = s}
/// (uniformly weighted) and returns false if the segment is empty. The
/// coordinate with the smaller |c| parametrizes the segment.
template <class F>
bool segment_quadrature(const CovariateLaw& law, const Eigen::Vector2d& c, double s, F&& f) {
  const int pv = std::fabs(c(0)) < std::fabs(c(1)) ? 0 : 1;
  const int so = 1 - pv;
  if (c(so) == 0.0) return false;
  // Solved coordinate: u_so = (s - c_pv v) / c_so, must lie in [0, 1].
  double lo = 0.0, hi = 1.0;
  const double a0 = s / c(so), a1 = -c(pv) / c(so);
  if (a1 == 0.0) {
    if (a0 < 0.0 || a0 > 1.0) return false;
  } else {
    double v0 = (0.0 - a0) / a1, v1 = (1.0 - a0) / a1;
    if (v0 > v1) std::swap(v0, v1);
    lo = std::max(lo, v0);
    hi = std::min(hi, v1);
  }
  if (!(hi > lo)) return false;
  const auto& rule = gauss_legendre_32();
  const double mid = 0.5 * (lo + hi), half = 0.5 * (hi - lo);
  Eigen::Vector2d u, x;
  for (std::size_t q = 0; q < rule.x.size(); ++q) {
    const double v = mid + half * rule.x[q];
    u(pv) = v;
    u(so) = std::clamp(a0 + a1 * v, 0.0, 1.0);
    x.noalias() = law.a * u + law.b;
    f(x, 0.5 * rule.w[q]);
  }
  return true;
}

inline void require_two_dims(const AdmissibleDgp& dgp) {
  if (dgp.k() != 2) throw Error(ErrorKind::InvalidArgument, "the quadrature oracle supports K = 2 only");
}

}  // namespace detail

struct ConditionalMoments {
  double mean0 = 0, mean1 = 0;  ///< E[m_d(X) | theta0^T X = t]
  double var0 = 0, var1 = 0;    ///< Var(Y^d | theta0^T X = t)
};

/// Conditional moments of the potential outcomes given the true index t,
/// which equal those given D = d and pi(X) = g(t).
inline ConditionalMoments conditional_moments(const AdmissibleDgp& dgp, double t) {
  detail::require_two_dims(dgp);
  const Eigen::Vector2d c = dgp.covariates.a.transpose() * dgp.theta0;
  const double s = t - dgp.theta0.dot(dgp.covariates.b);
  double e0 = 0, e1 = 0, e00 = 0, e11 = 0, es2 = 0;
  const bool noisy = dgp.noise.law != NoiseSpec::Law::None;
  const bool ok = detail::segment_quadrature(dgp.covariates, c, s, [&](const Eigen::Vector2d& x, double w) {
    const double a = dgp.m0(x.data(), t), b = dgp.m1(x.data(), t);
    e0 += w * a;
    e1 += w * b;
    e00 += w * a * a;
    e11 += w * b * b;
    if (noisy) {
      const double sc = dgp.noise.sd_scale(x.data());
      es2 += w * sc * sc;
    }
  });
  if (!ok) throw Error(ErrorKind::InvalidArgument, "index value outside the support");
  const double ve = es2 * dgp.noise.base_variance();
  return {e0, e1, std::max(e00 - e0 * e0, 0.0) + ve, std::max(e11 - e1 * e1, 0.0) + ve};
}

/// mu^d(theta0, p): the conditional mean of Y given D = d and pi(X) = p.
inline double conditional_mean(const AdmissibleDgp& dgp, int d, double p) {
  const auto m = conditional_moments(dgp, dgp.link.inverse(p));
  return d == 1 ? m.mean1 : m.mean0;
}

namespace detail {

/// nu^d(theta, t) = E[m_d w_d | theta^T X = t] / E[w_d | theta^T X = t] with
/// w_1 = pi(X), w_0 = 1 - pi(X): the conditional mean of Y given D = d and
/// theta^T X = t when treatment follows theta0.
inline std::array<double, 2> tilted_means(const AdmissibleDgp& dgp, const Eigen::Vector2d& theta, double t) {
  const Eigen::Vector2d c = dgp.covariates.a.transpose() * theta;
  const double s = t - theta.dot(dgp.covariates.b);
  double n0 = 0, n1 = 0, w0 = 0, w1 = 0;
  const bool ok = detail::segment_quadrature(dgp.covariates, c, s, [&](const Eigen::Vector2d& x, double w) {
    const double t0 = dgp.theta0.dot(x);
    const double p = dgp.link(t0);
    n0 += w * (1.0 - p) * dgp.m0(x.data(), t0);
    n1 += w * p * dgp.m1(x.data(), t0);
    w0 += w * (1.0 - p);
    w1 += w * p;
  });
  if (!ok) throw Error(ErrorKind::InvalidArgument, "level set misses the support");
  return {n0 / w0, n1 / w1};
}

}  // namespace detail

/// Lambda^d(theta0, x) = d/dtheta mu^d(theta, g(theta^T x)) at theta0, by
/// central differences of the quadrature conditional mean.
inline std::array<Eigen::Vector2d, 2> true_lambda(const AdmissibleDgp& dgp, const Eigen::Vector2d& x,
                                                  double step = 1e-5) {
  detail::require_two_dims(dgp);
  std::array<Eigen::Vector2d, 2> out;
  for (int k = 0; k < 2; ++k) {
    Eigen::Vector2d tp = dgp.theta0, tm = dgp.theta0;
    tp(k) += step;
    tm(k) -= step;
    const auto up = detail::tilted_means(dgp, tp, tp.dot(x));
    const auto dn = detail::tilted_means(dgp, tm, tm.dot(x));
    out[0](k) = (up[0] - dn[0]) / (2.0 * step);
    out[1](k) = (up[1] - dn[1]) / (2.0 * step);
  }
  return out;
}

/// Population quantities: estimands, the limiting variances of the caliper
/// estimators with known scores (v_total_*) and with estimated scores
/// (v_total_*_estimated), efficiency bounds, and the efficiency-loss and
/// nearest-neighbour comparison terms.
struct OracleScalars {
  double tau = 0, tau_t = 0, p1 = 0;
  double v_tau = 0, v_sigma_pi = 0, v_total_ate = 0, theta_term = 0, v_total_ate_estimated = 0;
  double v_tau_t = 0, v_t_sigma_pi = 0, v_total_att = 0, theta_term_t = 0, v_total_att_estimated = 0;
  double v_eff = 0, v_t_eff = 0, v_t_eff_pi = 0;
  double eff_loss_att = 0;   ///< (1/p1^2) E[pi (1 - pi) (tau(pi) - tau_t)^2]
  double nn_gain_unit = 0;   ///< nearest-neighbour variance excess times M
  double gap_ate = 0;        ///< v_total_ate - v_eff
  double gap_att = 0;        ///< v_total_att - v_t_eff
  double gap_eff_loss = 0;   ///< (v_t_eff - v_t_eff_pi) - eff_loss_att
};

struct OracleEffects : OracleScalars {
  OracleScalars mc_se;  ///< batch-means Monte Carlo standard errors
  Eigen::VectorXd q_1, q_0, q_t1, q_t0;
  Eigen::MatrixXd vtheta;
  std::size_t mc_n = 0;
  std::size_t batches = 0;
};

namespace detail {

struct OracleSums {
  double count = 0;
  double pi = 0, pi_dm = 0, dmu_c2 = 0, sig = 0, pi_dmu2 = 0, tsig = 0;
  double eff_a = 0, eff_sig = 0, pi_dm2 = 0, pi2_dm2 = 0, pi2_dm = 0, pi2 = 0, teff_sig = 0;
  double ppq_dmu2 = 0, ppq_dmu = 0, ppq = 0, nn = 0;
  Eigen::Vector2d lam1 = Eigen::Vector2d::Zero(), lam0 = Eigen::Vector2d::Zero();
  Eigen::Vector2d pi_lam1 = Eigen::Vector2d::Zero(), pi_lam0 = Eigen::Vector2d::Zero();
  Eigen::Matrix2d info = Eigen::Matrix2d::Zero();

  void add(const OracleSums& o) {
    count += o.count;
    pi += o.pi; pi_dm += o.pi_dm; dmu_c2 += o.dmu_c2; sig += o.sig; pi_dmu2 += o.pi_dmu2; tsig += o.tsig;
    eff_a += o.eff_a; eff_sig += o.eff_sig; pi_dm2 += o.pi_dm2; pi2_dm2 += o.pi2_dm2; pi2_dm += o.pi2_dm;
    pi2 += o.pi2; teff_sig += o.teff_sig; ppq_dmu2 += o.ppq_dmu2; ppq_dmu += o.ppq_dmu; ppq += o.ppq; nn += o.nn;
    lam1 += o.lam1; lam0 += o.lam0; pi_lam1 += o.pi_lam1; pi_lam0 += o.pi_lam0; info += o.info;
  }
};

struct OracleFinal {
  OracleScalars s;
  Eigen::Vector2d q1, q0, qt1, qt0;
  Eigen::Matrix2d vtheta;
};

inline OracleFinal finalize_oracle(const OracleSums& m, double tau) {
  OracleFinal f;
  auto& r = f.s;
  const double n = m.count;
  r.tau = tau;
  r.p1 = m.pi / n;
  const double p1 = r.p1, tt = m.pi_dm / m.pi;
  r.tau_t = tt;
  r.v_tau = m.dmu_c2 / n;
  r.v_sigma_pi = m.sig / n;
  r.v_total_ate = r.v_tau + r.v_sigma_pi;
  r.v_tau_t = (m.pi_dmu2 / n) / (p1 * p1) - tt * tt / p1;
  r.v_t_sigma_pi = (m.tsig / n) / (p1 * p1);
  r.v_total_att = r.v_tau_t + r.v_t_sigma_pi;
  f.q1 = m.lam1 / n;
  f.q0 = m.lam0 / n;
  f.qt1 = m.pi_lam1 / n;
  f.qt0 = m.pi_lam0 / n;
  f.vtheta = (m.info / n).inverse();
  const Eigen::Vector2d dq = f.q1 - f.q0, dqt = f.qt1 - f.qt0;
  r.theta_term = dq.dot(f.vtheta * dq);
  r.theta_term_t = dqt.dot(f.vtheta * dqt) / (p1 * p1);
  r.v_total_ate_estimated = r.v_total_ate + r.theta_term;
  r.v_total_att_estimated = r.v_total_att + r.theta_term_t;
  r.v_eff = (m.eff_a + m.eff_sig) / n;
  r.v_t_eff = ((m.pi_dm2 / n) - tt * tt * p1 + m.teff_sig / n) / (p1 * p1);
  r.v_t_eff_pi = ((m.pi2_dm2 - 2.0 * tt * m.pi2_dm + tt * tt * m.pi2) / n + m.teff_sig / n) / (p1 * p1);
  r.eff_loss_att = ((m.ppq_dmu2 - 2.0 * tt * m.ppq_dmu + tt * tt * m.ppq) / n) / (p1 * p1);
  r.nn_gain_unit = (m.nn / n) / (2.0 * p1 * p1);
  r.gap_ate = r.v_total_ate - r.v_eff;
  r.gap_att = r.v_total_att - r.v_t_eff;
  r.gap_eff_loss = (r.v_t_eff - r.v_t_eff_pi) - r.eff_loss_att;
  return f;
}

inline constexpr std::size_t kOracleScalarCount = sizeof(OracleScalars) / sizeof(double);

inline double* scalar_data(OracleScalars& s) { return &s.tau; }
inline const double* scalar_data(const OracleScalars& s) { return &s.tau; }

}  // namespace detail

/// Monte Carlo over X combined with 1-D quadrature for the conditional
/// moments given the index. Requires K = 2 and mc_n >= 10^4. Standard errors
/// use 20 batches of independent draws.
inline OracleEffects true_effects(const AdmissibleDgp& dgp, std::size_t mc_n, std::uint64_t seed,
                                  unsigned threads = 1) {
  dgp.validate();
  detail::require_two_dims(dgp);
  if (mc_n < 10000) throw Error(ErrorKind::TooSmall, "true_effects needs mc_n >= 10^4");
  static_assert(sizeof(OracleScalars) == detail::kOracleScalarCount * sizeof(double));
  constexpr std::size_t kBatches = 20;
  const double tau = dgp.tau();
  const double var_eps = dgp.noise.base_variance();
  const bool noisy = dgp.noise.law != NoiseSpec::Law::None;
  std::vector<detail::OracleSums> sums(kBatches);

  parallel_for(kBatches, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t b = begin; b < end; ++b) {
      const std::size_t size = mc_n / kBatches + (b < mc_n % kBatches ? 1 : 0);
      Rng rng(derive_seed(seed, b));
      auto& m = sums[b];
      Eigen::Vector2d u, x;
      for (std::size_t i = 0; i < size; ++i) {
        u(0) = rng.uniform();
        u(1) = rng.uniform();
        x.noalias() = dgp.covariates.a * u + dgp.covariates.b;
        const double t = dgp.theta0.dot(x);
        const auto lv = dgp.link.eval(t);
        const double p = lv.g;
        const auto cm = conditional_moments(dgp, t);
        const auto lam = true_lambda(dgp, x);
        const double dm = dgp.m1(x.data(), t) - dgp.m0(x.data(), t);
        const double dmu = cm.mean1 - cm.mean0;
        double sx2 = 0.0;
        if (noisy) {
          const double sc = dgp.noise.sd_scale(x.data());
          sx2 = sc * sc * var_eps;
        }
        const double pq = p * (1.0 - p);
        m.count += 1;
        m.pi += p;
        m.pi_dm += p * dm;
        m.dmu_c2 += (dmu - tau) * (dmu - tau);
        m.sig += cm.var0 / (1.0 - p) + cm.var1 / p;
        m.pi_dmu2 += p * dmu * dmu;
        m.tsig += p * p * cm.var0 / (1.0 - p) + p * cm.var1;
        m.eff_a += (dm - tau) * (dm - tau);
        m.eff_sig += sx2 / (1.0 - p) + sx2 / p;
        m.pi_dm2 += p * dm * dm;
        m.pi2_dm2 += p * p * dm * dm;
        m.pi2_dm += p * p * dm;
        m.pi2 += p * p;
        m.teff_sig += p * p * sx2 / (1.0 - p) + p * sx2;
        m.ppq_dmu2 += pq * dmu * dmu;
        m.ppq_dmu += pq * dmu;
        m.ppq += pq;
        m.nn += cm.var0 * p * (2.0 + p / (1.0 - p));
        m.lam1 += lam[1];
        m.lam0 += lam[0];
        m.pi_lam1 += p * lam[1];
        m.pi_lam0 += p * lam[0];
        m.info += (lv.dg * lv.dg / pq) * x * x.transpose();
      }
    }
  });

  detail::OracleSums total;
  for (const auto& s : sums) total.add(s);
  const auto full = detail::finalize_oracle(total, tau);

  OracleEffects out;
  static_cast<OracleScalars&>(out) = full.s;
  out.q_1 = full.q1;
  out.q_0 = full.q0;
  out.q_t1 = full.qt1;
  out.q_t0 = full.qt0;
  out.vtheta = full.vtheta;
  out.mc_n = mc_n;
  out.batches = kBatches;

  std::array<double, detail::kOracleScalarCount> mean{}, sq{};
  std::vector<OracleScalars> per(kBatches);
  for (std::size_t b = 0; b < kBatches; ++b) {
    per[b] = detail::finalize_oracle(sums[b], tau).s;
    const double* v = detail::scalar_data(per[b]);
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += v[j] / static_cast<double>(kBatches);
  }
  for (std::size_t b = 0; b < kBatches; ++b) {
    const double* v = detail::scalar_data(per[b]);
    for (std::size_t j = 0; j < sq.size(); ++j) sq[j] += (v[j] - mean[j]) * (v[j] - mean[j]);
  }
  double* se = detail::scalar_data(out.mc_se);
  const double bb = static_cast<double>(kBatches);
  for (std::size_t j = 0; j < sq.size(); ++j) se[j] = std::sqrt(sq[j] / (bb - 1.0) / bb);
  return out;
}

/// tau_t = E[pi (m1 - m0)] / E[pi] by plain Monte Carlo (no quadrature).
/// Exact when m1 - m0 is constant.
inline double true_tau_t(const AdmissibleDgp& dgp, std::size_t mc_n, std::uint64_t seed) {
  dgp.validate();
  if (RegressionFn::differ_by_constant(dgp.m1, dgp.m0)) return dgp.tau();
  const auto k = static_cast<Eigen::Index>(dgp.k());
  Rng rng(seed);
  Eigen::VectorXd u(k), x(k);
  long double num = 0, den = 0;
  for (std::size_t i = 0; i < mc_n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) u(j) = rng.uniform();
    x.noalias() = dgp.covariates.a * u + dgp.covariates.b;
    const double t = dgp.theta0.dot(x);
    const double p = dgp.link(t);
    num += p * (dgp.m1(x.data(), t) - dgp.m0(x.data(), t));
    den += p;
  }
  return static_cast<double>(num / den);
}

}  // namespace caliper
