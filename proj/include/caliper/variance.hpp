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
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
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
#include "caliper/parallel.hpp"
#include "caliper/propensity.hpp"

namespace caliper {

/// Lower bound on a kernel density estimate used as a quotient denominator.
inline constexpr double kDensityFloor = 1e-12;
/// Kernel terms with |u| beyond this are dropped on the fast path.
inline constexpr double kKernelCutoff = 8.0;

/// Bandwidth settings: gamma_n = kappa0 n^-beta for the kernel smoothers and
/// a_n = kappa1 n^-alpha for the boundary truncation, with 0 < alpha < beta < 1/4.
/// Unset kappa0 values default to the sample standard deviation of the
/// values being smoothed (scores, or the linear index for theta-derivatives).
struct KernelBandwidths {
  std::optional<double> kappa0_score;
  std::optional<double> kappa0_index;
  double kappa1 = 0.1;
  double alpha = 1.0 / 4.5;
  double beta = 1.0 / 4.25;
  bool truncate_tails = true;

  void validate() const {
    if (!(alpha > 0.0 && alpha < beta && beta < 0.25)) {
      throw Error(ErrorKind::InvalidArgument, "bandwidth exponents need 0 < alpha < beta < 1/4");
    }
    if (!(kappa1 > 0.0) || !std::isfinite(kappa1)) throw Error(ErrorKind::InvalidArgument, "kappa1 must be positive");
    for (const auto& k : {kappa0_score, kappa0_index}) {
      if (k && (!(*k > 0.0) || !std::isfinite(*k))) throw Error(ErrorKind::InvalidArgument, "kappa0 must be positive");
    }
  }
};

struct ResolvedBandwidths {
  std::size_t n = 0;
  double kappa0_score = 0.0;
  double kappa0_index = 0.0;
  double gamma_score = 0.0;
  double gamma_index = 0.0;
  double a_n = 0.0;
};

namespace detail {

inline double population_sd(std::span<const double> v) {
  if (v.empty()) return 0.0;
  long double mean = 0.0L;
  for (double x : v) mean += x;
  mean /= static_cast<long double>(v.size());
  long double ss = 0.0L;
  for (double x : v) ss += (x - mean) * (x - mean);
  return static_cast<double>(std::sqrt(ss / static_cast<long double>(v.size())));
}

}  // namespace detail

inline ResolvedBandwidths resolve_bandwidths(const KernelBandwidths& bw, std::size_t n,
                                             std::span<const double> scores,
                                             std::span<const double> index = {}) {
  bw.validate();
  if (n == 0) throw Error(ErrorKind::TooSmall, "bandwidths need n >= 1");
  ResolvedBandwidths out;
  out.n = n;
  out.kappa0_score = bw.kappa0_score.value_or(detail::population_sd(scores));
  out.kappa0_index = bw.kappa0_index.value_or(index.empty() ? 0.0 : detail::population_sd(index));
  if (!(out.kappa0_score > 0.0)) throw Error(ErrorKind::DegenerateWindow, "scores have zero spread");
  const double nd = static_cast<double>(n);
  out.gamma_score = out.kappa0_score * std::pow(nd, -bw.beta);
  out.gamma_index = out.kappa0_index * std::pow(nd, -bw.beta);
  out.a_n = bw.kappa1 * std::pow(nd, -bw.alpha);
  return out;
}

/// Score interval [min p + a_n, max p - a_n] inside which the variance
/// components are averaged.
struct TruncationWindow {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::uint8_t> in_window;
  std::size_t n_hat = 0;
};

inline TruncationWindow truncation_window(std::span<const double> scores, double a_n) {
  if (scores.empty()) throw Error(ErrorKind::TooSmall, "no scores");
  const auto [mn, mx] = std::minmax_element(scores.begin(), scores.end());
  TruncationWindow w;
  w.lo = *mn + a_n;
  w.hi = *mx - a_n;
  if (!(w.lo < w.hi)) {
    throw Error(ErrorKind::DegenerateWindow, "truncation a_n=" + std::to_string(a_n) +
                                                 " exceeds half the score range");
  }
  w.in_window.resize(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    w.in_window[i] = scores[i] >= w.lo && scores[i] <= w.hi;
    w.n_hat += w.in_window[i];
  }
  if (w.n_hat == 0) throw Error(ErrorKind::DegenerateWindow, "no unit falls inside the truncation window");
  return w;
}

struct KernelValue {
  double k;       ///< K(u)
  double kprime;  ///< K'(u) = -u K(u)
};

/// Gaussian kernel and its derivative.
inline KernelValue gaussian_kernel(double u) noexcept {
  const double k = normal::kInvSqrt2Pi * std::exp(-0.5 * u * u);
  return {k, -u * k};
}

enum class KernelWeight { One, Y, Y2, YX, X };

/// Direct O(n) kernel sum over group `group`:
///   derivative = false: (1 / (N_d gamma))   sum_{j: D_j = d} w_j K(u_j)
///   derivative = true:  (1 / (N_d gamma^2)) sum_{j: D_j = d} w_j K'(u_j)
/// with u_j = (z_j - at) / gamma and w_j chosen by `weight` (`column` picks
/// X_{j,k} for the YX and X weights). The p-derivative of a score-space sum
/// is minus the derivative sum; the theta_k-derivative of an index-space sum
/// is (g^-1)'(p) times it.
inline double group_kernel_sum(std::span<const double> z, std::span<const double> y, std::span<const int> d,
                               int group, double at, double gamma, KernelWeight weight, bool derivative,
                               const Eigen::MatrixXd* x = nullptr, std::size_t column = 0) {
  if (z.size() != d.size() || y.size() != d.size()) throw Error(ErrorKind::LengthMismatch, "kernel inputs differ in length");
  if (!(gamma > 0.0)) throw Error(ErrorKind::InvalidArgument, "bandwidth must be positive");
  if ((weight == KernelWeight::YX || weight == KernelWeight::X) &&
      (x == nullptr || column >= static_cast<std::size_t>(x->cols()))) {
    throw Error(ErrorKind::DimensionMismatch, "covariate column unavailable");
  }
  long double sum = 0.0L;
  std::size_t count = 0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    if (d[j] != group) continue;
    ++count;
    const auto kv = gaussian_kernel((z[j] - at) / gamma);
    double w = 1.0;
    switch (weight) {
      case KernelWeight::One: break;
      case KernelWeight::Y: w = y[j]; break;
      case KernelWeight::Y2: w = y[j] * y[j]; break;
      case KernelWeight::YX: w = y[j] * (*x)(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(column)); break;
      case KernelWeight::X: w = (*x)(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(column)); break;
    }
    sum += w * (derivative ? kv.kprime : kv.k);
  }
  if (count == 0) throw Error(ErrorKind::EmptyGroup, "group " + std::to_string(group) + " is empty");
  const double scale = derivative ? gamma * gamma : gamma;
  return static_cast<double>(sum / (static_cast<long double>(count) * scale));
}

/// Kernel sums for one treatment group, sorted by the smoothing variable so
/// that terms beyond the cutoff can be skipped.
class GroupSmoother {
 public:
  struct Moments {
    double h = 0.0;   ///< (1/(N gamma)) sum K
    double q = 0.0;   ///< (1/(N gamma)) sum Y K
    double q2 = 0.0;  ///< (1/(N gamma)) sum Y^2 K
    double dh = 0.0;  ///< (1/(N gamma^2)) sum K'
    double dq = 0.0;  ///< (1/(N gamma^2)) sum Y K'
  };

  GroupSmoother() = default;

  GroupSmoother(std::span<const double> z, std::span<const double> y, std::span<const int> d, int group,
                double gamma, bool truncate, const Eigen::MatrixXd* x = nullptr)
      : gamma_(gamma), truncate_(truncate) {
    if (!(gamma > 0.0)) throw Error(ErrorKind::InvalidArgument, "bandwidth must be positive");
    std::vector<std::size_t> rows;
    for (std::size_t j = 0; j < d.size(); ++j) {
      if (d[j] == group) rows.push_back(j);
    }
    if (rows.empty()) throw Error(ErrorKind::EmptyGroup, "group " + std::to_string(group) + " is empty");
    std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) { return z[a] < z[b]; });
    k_ = x ? static_cast<std::size_t>(x->cols()) : 0;
    z_.reserve(rows.size());
    y_.reserve(rows.size());
    x_.reserve(rows.size() * k_);
    for (auto j : rows) {
      z_.push_back(z[j]);
      y_.push_back(y[j]);
      for (std::size_t c = 0; c < k_; ++c) {
        x_.push_back((*x)(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c)));
      }
    }
  }

  std::size_t size() const noexcept { return z_.size(); }
  std::size_t columns() const noexcept { return k_; }
  double gamma() const noexcept { return gamma_; }

  Moments moments(double at) const {
    const auto [begin, end] = range(at);
    const double inv_gamma = 1.0 / gamma_;
    double h = 0, q = 0, q2 = 0, dh = 0, dq = 0;
    for (std::size_t j = begin; j < end; ++j) {
      const double u = (z_[j] - at) * inv_gamma;
      const double k = std::exp(-0.5 * u * u);
      const double ky = k * y_[j];
      h += k;
      q += ky;
      q2 += ky * y_[j];
      dh -= u * k;
      dq -= u * ky;
    }
    const double c1 = normal::kInvSqrt2Pi / (static_cast<double>(z_.size()) * gamma_);
    const double c2 = c1 / gamma_;
    return {h * c1, q * c1, q2 * c1, dh * c2, dq * c2};
  }

  /// (1/(N gamma^2)) sum X_{j,k} K'(u_j) and (1/(N gamma^2)) sum Y_j X_{j,k} K'(u_j).
  void derivative_sums(double at, std::span<double> dh_k, std::span<double> dq_k) const {
    if (dh_k.size() != k_ || dq_k.size() != k_) throw Error(ErrorKind::DimensionMismatch, "derivative buffers");
    std::fill(dh_k.begin(), dh_k.end(), 0.0);
    std::fill(dq_k.begin(), dq_k.end(), 0.0);
    const auto [begin, end] = range(at);
    const double inv_gamma = 1.0 / gamma_;
    for (std::size_t j = begin; j < end; ++j) {
      const double u = (z_[j] - at) * inv_gamma;
      const double kp = -u * std::exp(-0.5 * u * u);
      const double kpy = kp * y_[j];
      const double* row = x_.data() + j * k_;
      for (std::size_t c = 0; c < k_; ++c) {
        dh_k[c] += row[c] * kp;
        dq_k[c] += row[c] * kpy;
      }
    }
    const double c2 = normal::kInvSqrt2Pi / (static_cast<double>(z_.size()) * gamma_ * gamma_);
    for (std::size_t c = 0; c < k_; ++c) {
      dh_k[c] *= c2;
      dq_k[c] *= c2;
    }
  }

 private:
  std::pair<std::size_t, std::size_t> range(double at) const {
    if (!truncate_) return {0, z_.size()};
    const double reach = kKernelCutoff * gamma_;
    const auto lo = std::lower_bound(z_.begin(), z_.end(), at - reach);
    const auto hi = std::upper_bound(lo, z_.end(), at + reach);
    return {static_cast<std::size_t>(lo - z_.begin()), static_cast<std::size_t>(hi - z_.begin())};
  }

  std::vector<double> z_, y_, x_;
  std::size_t k_ = 0;
  double gamma_ = 1.0;
  bool truncate_ = true;
};

struct Sigma2Estimate {
  double value;
  bool clamped;
};

/// Kernel estimators of the conditional moments of Y given (D = d, score = p)
/// and, when built with a fitted index, of their theta-derivatives.
class KernelRegression {
 public:
  /// Score-space estimator only (known propensity scores).
  KernelRegression(std::span<const double> y, std::span<const int> d, std::span<const double> scores,
                   const ResolvedBandwidths& bw, bool truncate = true)
      : link_(Link::logit()) {
    for (int g = 0; g < 2; ++g) score_[g] = GroupSmoother(scores, y, d, g, bw.gamma_score, truncate);
  }

  /// Score- and index-space estimator at `theta`; `design` rows are the X_j
  /// (including any intercept column) and scores must equal g(theta^T X_j).
  KernelRegression(std::span<const double> y, std::span<const int> d, std::span<const double> scores,
                   const Eigen::MatrixXd& design, const Eigen::VectorXd& theta, const Link& link,
                   const ResolvedBandwidths& bw, bool truncate = true)
      : KernelRegression(y, d, scores, bw, truncate) {
    if (design.cols() != theta.size()) throw Error(ErrorKind::DimensionMismatch, "design columns vs theta");
    if (static_cast<std::size_t>(design.rows()) != y.size()) throw Error(ErrorKind::LengthMismatch, "design rows");
    if (!(bw.gamma_index > 0.0)) throw Error(ErrorKind::InvalidArgument, "index bandwidth must be positive");
    link_ = link;
    theta_ = theta;
    const Eigen::VectorXd index = design * theta;
    const std::span<const double> z(index.data(), static_cast<std::size_t>(index.size()));
    for (int g = 0; g < 2; ++g) index_[g] = GroupSmoother(z, y, d, g, bw.gamma_index, truncate, &design);
    has_index_ = true;
  }

  bool has_index() const noexcept { return has_index_; }
  const Link& link() const noexcept { return link_; }

  GroupSmoother::Moments moments(int d, double p) const { return smoother(d).moments(p); }

  double density(int d, double p) const { return smoother(d).moments(p).h; }

  double mu(int d, double p) const {
    const auto m = checked(d, p);
    return m.q / m.h;
  }

  Sigma2Estimate sigma2(int d, double p) const {
    const auto m = checked(d, p);
    const double mu = m.q / m.h;
    const double v = m.q2 / m.h - mu * mu;
    return v < 0.0 ? Sigma2Estimate{0.0, true} : Sigma2Estimate{v, false};
  }

  /// d mu / dp by the quotient rule on the score-space sums.
  double dmu_dp(int d, double p) const {
    const auto m = checked(d, p);
    return quotient_dp(m);
  }

  /// d mu / d theta at (theta, p) from index-space kernel derivatives at g^-1(p).
  Eigen::VectorXd dmu_dtheta(int d, double p) const {
    const auto m = checked(d, p);
    return dmu_dtheta_impl(d, m, link_.inverse(p), link_.inverse_derivative(p));
  }

  /// Lambda^d(theta, x) = dmu/dtheta^T + dmu/dp * g'(theta^T x) x^T.
  Eigen::VectorXd lambda(int d, const Eigen::VectorXd& x_row) const {
    require_index();
    if (x_row.size() != theta_.size()) {
      throw Error(ErrorKind::DimensionMismatch, "x row has " + std::to_string(x_row.size()) +
                                                    " entries, theta has " + std::to_string(theta_.size()));
    }
    const double t = theta_.dot(x_row);
    const double p = link_(t);
    const auto m = checked(d, p);
    Eigen::VectorXd out = dmu_dtheta_impl(d, m, link_.inverse(p), link_.inverse_derivative(p));
    out += quotient_dp(m) * link_.derivative(t) * x_row;
    return out;
  }

 private:
  const GroupSmoother& smoother(int d) const {
    if (d != 0 && d != 1) throw Error(ErrorKind::InvalidArgument, "group must be 0 or 1");
    return score_[d];
  }

  GroupSmoother::Moments checked(int d, double p) const {
    const auto m = smoother(d).moments(p);
    if (!(m.h >= kDensityFloor)) {
      throw Error(ErrorKind::DensityFloor, "group " + std::to_string(d) + " density below floor at p=" +
                                               std::to_string(p));
    }
    return m;
  }

  void require_index() const {
    if (!has_index_) throw Error(ErrorKind::InvalidArgument, "theta-derivatives need a fitted index");
  }

  static double quotient_dp(const GroupSmoother::Moments& m) {
    // d/dp of the score-space sums is minus the raw derivative sums.
    return (-m.dq * m.h + m.q * m.dh) / (m.h * m.h);
  }

  Eigen::VectorXd dmu_dtheta_impl(int d, const GroupSmoother::Moments& m, double t, double inv_deriv) const {
    require_index();
    const auto k = index_[d].columns();
    std::vector<double> dh(k), dq(k);
    index_[d].derivative_sums(t, dh, dq);
    Eigen::VectorXd out(static_cast<Eigen::Index>(k));
    for (std::size_t c = 0; c < k; ++c) {
      out(static_cast<Eigen::Index>(c)) = inv_deriv * (dq[c] * m.h - m.q * dh[c]) / (m.h * m.h);
    }
    return out;
  }

  GroupSmoother score_[2];
  GroupSmoother index_[2];
  Link link_;
  Eigen::VectorXd theta_;
  bool has_index_ = false;
};

struct VarianceFlags {
  bool v_tau = false;
  bool v_sigma_pi = false;
  bool theta_term = false;
  bool v_tau_t = false;
  bool v_t_sigma_pi = false;
  bool theta_term_t = false;
  std::size_t sigma2_clamped = 0;  ///< evaluations where a sigma^2 estimate was clamped at 0
};

/// Variance components for the ATE and ATT and their totals. Components are
/// clamped at zero individually; `raw_*` keep the unclamped values.
struct VarianceReport {
  double v_tau = 0, v_sigma_pi = 0, theta_term = 0;
  double v_tau_t = 0, v_t_sigma_pi = 0, theta_term_t = 0;
  double raw_v_tau = 0, raw_v_sigma_pi = 0, raw_theta_term = 0;
  double raw_v_tau_t = 0, raw_v_t_sigma_pi = 0, raw_theta_term_t = 0;
  Eigen::VectorXd q_hat_1, q_hat_0, q_hat_t1, q_hat_t0;
  double v_total_ate = 0, v_total_att = 0;
  double p1_hat = 0;
  double theta_scale = 1.0;
  bool estimated_scores = false;
  VarianceFlags clamped;
  ResolvedBandwidths bandwidths;
  double window_lo = 0, window_hi = 0;
  std::size_t n_hat = 0;
  std::size_t n = 0;
};

/// Inputs describing the fitted propensity model, for the estimated-score
/// variance. `theta_scale` multiplies the theta-terms; it is
/// n_estimation / n_fit when the model was fitted on a different sample size.
struct FittedIndex {
  const Eigen::MatrixXd* design = nullptr;
  const Eigen::VectorXd* theta = nullptr;
  const Eigen::MatrixXd* vtheta = nullptr;
  Link link = Link::logit();
  double theta_scale = 1.0;
};

namespace detail {

inline double clamp_flag(double v, bool& flag) {
  flag = v < 0.0;
  return flag ? 0.0 : v;
}

}  // namespace detail

/// Assembles the kernel-based variance estimators. Without `fitted` the
/// scores are treated as known and both theta-terms are exactly zero.
inline VarianceReport variance_components(std::span<const double> y, std::span<const int> d,
                                          std::span<const double> scores, const PointEstimates& estimates,
                                          const KernelBandwidths& bandwidths,
                                          const std::optional<FittedIndex>& fitted = std::nullopt,
                                          unsigned threads = 1) {
  const auto n = y.size();
  if (d.size() != n || scores.size() != n) throw Error(ErrorKind::LengthMismatch, "variance inputs differ in length");
  if (fitted) {
    if (!fitted->design || !fitted->theta || !fitted->vtheta) {
      throw Error(ErrorKind::InvalidArgument, "fitted index is incomplete");
    }
    if (static_cast<std::size_t>(fitted->design->rows()) != n) throw Error(ErrorKind::LengthMismatch, "design rows");
    const auto k = fitted->theta->size();
    if (fitted->design->cols() != k || fitted->vtheta->rows() != k || fitted->vtheta->cols() != k) {
      throw Error(ErrorKind::DimensionMismatch, "design, theta and V_theta dimensions disagree");
    }
  }
  std::size_t n1 = 0;
  for (int di : d) n1 += static_cast<std::size_t>(di == 1);
  if (n1 == 0 || n1 == n) throw Error(ErrorKind::EmptyGroup, "both treatment groups are required");

  VarianceReport r;
  r.n = n;
  r.estimated_scores = fitted.has_value();
  r.p1_hat = static_cast<double>(n1) / static_cast<double>(n);

  Eigen::VectorXd index;
  if (fitted) index = (*fitted->design) * (*fitted->theta);
  r.bandwidths = resolve_bandwidths(bandwidths, n, scores,
                                    std::span<const double>(index.data(), static_cast<std::size_t>(index.size())));
  const auto window = truncation_window(scores, r.bandwidths.a_n);
  r.window_lo = window.lo;
  r.window_hi = window.hi;
  r.n_hat = window.n_hat;

  const auto regression =
      fitted ? KernelRegression(y, d, scores, *fitted->design, *fitted->theta, fitted->link, r.bandwidths,
                                bandwidths.truncate_tails)
             : KernelRegression(y, d, scores, r.bandwidths, bandwidths.truncate_tails);

  std::vector<std::size_t> units;
  units.reserve(window.n_hat);
  for (std::size_t i = 0; i < n; ++i) {
    if (window.in_window[i]) units.push_back(i);
  }
  const auto k = fitted ? static_cast<std::size_t>(fitted->theta->size()) : 0;

  struct UnitTerms {
    double mu0, mu1, s0, s1;
    bool floor_failed;
    std::uint8_t clamped;
  };
  std::vector<UnitTerms> terms(units.size());
  std::vector<double> lambda0(units.size() * k), lambda1(units.size() * k);

  parallel_for(units.size(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t u = begin; u < end; ++u) {
      const auto i = units[u];
      const double p = scores[i];
      auto& t = terms[u];
      const auto m0 = regression.moments(0, p);
      const auto m1 = regression.moments(1, p);
      if (!(m0.h >= kDensityFloor) || !(m1.h >= kDensityFloor)) {
        t.floor_failed = true;
        continue;
      }
      t.floor_failed = false;
      t.mu0 = m0.q / m0.h;
      t.mu1 = m1.q / m1.h;
      const double v0 = m0.q2 / m0.h - t.mu0 * t.mu0;
      const double v1 = m1.q2 / m1.h - t.mu1 * t.mu1;
      t.clamped = static_cast<std::uint8_t>((v0 < 0.0) + (v1 < 0.0));
      t.s0 = std::max(v0, 0.0);
      t.s1 = std::max(v1, 0.0);
      if (fitted) {
        const Eigen::VectorXd x_row = fitted->design->row(static_cast<Eigen::Index>(i)).transpose();
        const Eigen::VectorXd l0 = regression.lambda(0, x_row);
        const Eigen::VectorXd l1 = regression.lambda(1, x_row);
        for (std::size_t c = 0; c < k; ++c) {
          lambda0[u * k + c] = l0(static_cast<Eigen::Index>(c));
          lambda1[u * k + c] = l1(static_cast<Eigen::Index>(c));
        }
      }
    }
  });

  std::string offenders;
  std::size_t n_offenders = 0;
  for (std::size_t u = 0; u < units.size(); ++u) {
    if (!terms[u].floor_failed) continue;
    if (n_offenders < 20) offenders += (n_offenders ? "," : "") + std::to_string(units[u]);
    ++n_offenders;
  }
  if (n_offenders > 0) {
    throw Error(ErrorKind::DensityFloor, std::to_string(n_offenders) +
                                             " in-window units have a group density below the floor (units " +
                                             offenders + (n_offenders > 20 ? ",..." : "") + ")");
  }

  // Fixed summation order over units keeps results independent of threads.
  long double s_tau = 0, s_tau_t = 0, s_sigma = 0, s_sigma_t = 0;
  Eigen::VectorXd q0 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(k));
  Eigen::VectorXd q1 = q0, qt0 = q0, qt1 = q0;
  for (std::size_t u = 0; u < units.size(); ++u) {
    const auto i = units[u];
    const auto& t = terms[u];
    const double p = scores[i];
    const double diff2 = (t.mu1 - t.mu0) * (t.mu1 - t.mu0);
    s_tau += diff2;
    if (d[i] == 1) s_tau_t += diff2;
    s_sigma += t.s0 / (1.0 - p) + t.s1 / p;
    s_sigma_t += p * p * t.s0 / (1.0 - p) + p * t.s1;
    r.clamped.sigma2_clamped += t.clamped;
    for (std::size_t c = 0; c < k; ++c) {
      const auto e = static_cast<Eigen::Index>(c);
      q0(e) += lambda0[u * k + c];
      q1(e) += lambda1[u * k + c];
      if (d[i] == 1) {
        qt0(e) += lambda0[u * k + c];
        qt1(e) += lambda1[u * k + c];
      }
    }
  }
  const double n_hat = static_cast<double>(window.n_hat);
  const double p1 = r.p1_hat;
  const double tau = estimates.tau_hat;
  const double tau_t = estimates.tau_t_hat;

  r.raw_v_tau = static_cast<double>(s_tau / n_hat) - tau * tau;
  r.raw_v_tau_t = static_cast<double>(s_tau_t / n_hat) / (p1 * p1) - tau_t * tau_t / p1;
  r.raw_v_sigma_pi = static_cast<double>(s_sigma / n_hat);
  r.raw_v_t_sigma_pi = static_cast<double>(s_sigma_t / n_hat) / (p1 * p1);
  if (fitted) {
    r.q_hat_0 = q0 / n_hat;
    r.q_hat_1 = q1 / n_hat;
    r.q_hat_t0 = qt0 / n_hat;
    r.q_hat_t1 = qt1 / n_hat;
    r.theta_scale = fitted->theta_scale;
    const Eigen::VectorXd dq = r.q_hat_1 - r.q_hat_0;
    const Eigen::VectorXd dqt = r.q_hat_t1 - r.q_hat_t0;
    r.raw_theta_term = dq.dot(*fitted->vtheta * dq) * fitted->theta_scale;
    r.raw_theta_term_t = dqt.dot(*fitted->vtheta * dqt) / (p1 * p1) * fitted->theta_scale;
  }
  r.v_tau = detail::clamp_flag(r.raw_v_tau, r.clamped.v_tau);
  r.v_tau_t = detail::clamp_flag(r.raw_v_tau_t, r.clamped.v_tau_t);
  r.v_sigma_pi = detail::clamp_flag(r.raw_v_sigma_pi, r.clamped.v_sigma_pi);
  r.v_t_sigma_pi = detail::clamp_flag(r.raw_v_t_sigma_pi, r.clamped.v_t_sigma_pi);
  r.theta_term = detail::clamp_flag(r.raw_theta_term, r.clamped.theta_term);
  r.theta_term_t = detail::clamp_flag(r.raw_theta_term_t, r.clamped.theta_term_t);
  r.v_total_ate = r.v_tau + r.v_sigma_pi + r.theta_term;
  r.v_total_att = r.v_tau_t + r.v_t_sigma_pi + r.theta_term_t;
  return r;
}

/// Convenience overload taking the table, the match index that carries the
/// scores, and an optional fitted propensity model.
inline VarianceReport variance_components(const ObservationTable& table, const PropensityFit* fit,
                                          const MatchIndex& index, const PointEstimates& estimates,
                                          const KernelBandwidths& bandwidths, unsigned threads = 1,
                                          double theta_scale = 1.0) {
  if (index.size() != table.n()) throw Error(ErrorKind::LengthMismatch, "index and table differ in size");
  if (!fit) return variance_components(table.y(), table.d(), index.scores(), estimates, bandwidths, std::nullopt, threads);
  if (!fit->converged) throw Error(ErrorKind::NoConvergence, "propensity fit did not converge");
  const Eigen::MatrixXd design = table.design();
  FittedIndex fitted{&design, &fit->theta, &fit->vtheta, fit->link, theta_scale};
  return variance_components(table.y(), table.d(), index.scores(), estimates, bandwidths, fitted, threads);
}

}  // namespace caliper
