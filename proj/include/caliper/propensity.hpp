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
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "caliper/core_data.hpp"
#include "caliper/error.hpp"
#include "caliper/normal.hpp"

namespace caliper {

/// Scores are kept inside [kScoreClamp, 1 - kScoreClamp] so that 1/p and
/// 1/(1-p) stay finite.
inline constexpr double kScoreClamp = 1e-12;

enum class LinkKind { Logit, Probit };

struct LinkValues {
  double g;    ///< link value, clamped into the open unit interval
  double dg;   ///< first derivative
  double d2g;  ///< second derivative
  bool clamped;
};

/// Strictly increasing single-index link g with its derivatives and inverse.
/// Both supported links are symmetric, 1 - g(t) = g(-t), which the
/// likelihood code relies on.
class Link {
 public:
  constexpr explicit Link(LinkKind kind = LinkKind::Logit) noexcept : kind_(kind) {}
  static constexpr Link logit() noexcept { return Link(LinkKind::Logit); }
  static constexpr Link probit() noexcept { return Link(LinkKind::Probit); }

  constexpr LinkKind kind() const noexcept { return kind_; }
  constexpr std::string_view name() const noexcept {
    return kind_ == LinkKind::Logit ? "logit" : "probit";
  }
  static Link from_name(std::string_view name) {
    if (name == "logit") return logit();
    if (name == "probit") return probit();
    throw Error(ErrorKind::InvalidArgument, "unknown link \"" + std::string(name) + "\"");
  }

  /// Unclamped g(t).
  double raw(double t) const noexcept {
    if (kind_ == LinkKind::Probit) return normal::cdf(t);
    if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
    const double e = std::exp(t);
    return e / (1.0 + e);
  }

  LinkValues eval(double t) const noexcept {
    double g = raw(t), dg, d2g;
    if (kind_ == LinkKind::Probit) {
      dg = normal::pdf(t);
      d2g = -t * dg;
    } else {
      const double e = std::exp(-std::fabs(t));
      dg = e / ((1.0 + e) * (1.0 + e));
      d2g = dg * (1.0 - 2.0 * g);
    }
    bool clamped = false;
    if (g < kScoreClamp) {
      g = kScoreClamp;
      clamped = true;
    } else if (g > 1.0 - kScoreClamp) {
      g = 1.0 - kScoreClamp;
      clamped = true;
    }
    return {g, dg, d2g, clamped};
  }

  /// g(t) clamped into [kScoreClamp, 1 - kScoreClamp].
  double operator()(double t) const noexcept {
    return std::clamp(raw(t), kScoreClamp, 1.0 - kScoreClamp);
  }

  double derivative(double t) const noexcept { return eval(t).dg; }

  double inverse(double p) const noexcept {
    if (kind_ == LinkKind::Probit) return normal::quantile(p);
    return std::log(p) - std::log1p(-p);
  }

  /// (g^-1)'(p) = 1 / g'(g^-1(p)).
  double inverse_derivative(double p) const noexcept {
    if (kind_ == LinkKind::Logit) return 1.0 / (p * (1.0 - p));
    return 1.0 / normal::pdf(normal::quantile(p));
  }

  constexpr double sup_derivative() const noexcept {
    return kind_ == LinkKind::Logit ? 0.25 : normal::kInvSqrt2Pi;
  }

  /// log g(t), accurate in both tails.
  double log_g(double t) const noexcept {
    if (kind_ == LinkKind::Logit) {
      return t >= 0 ? -std::log1p(std::exp(-t)) : t - std::log1p(std::exp(t));
    }
    if (t > -30.0) return std::log(normal::cdf(t));
    const double t2 = t * t;
    return -0.5 * t2 - std::log(-t) - 0.5 * std::log(2.0 * std::numbers::pi) +
           std::log1p(-1.0 / t2 + 3.0 / (t2 * t2));
  }

  /// g'(t) / g(t).
  double ratio(double t) const noexcept {
    if (kind_ == LinkKind::Logit) return raw(-t);
    const double log_pdf = -0.5 * t * t - 0.5 * std::log(2.0 * std::numbers::pi);
    return std::exp(log_pdf - log_g(t));
  }

  /// g''(t) / g'(t).
  double curvature(double t) const noexcept {
    if (kind_ == LinkKind::Logit) return 1.0 - 2.0 * raw(t);
    return -t;
  }

  /// Fisher information weight g'(t)^2 / (g(t)(1 - g(t))).
  double information_weight(double t) const noexcept { return ratio(t) * ratio(-t); }

  friend constexpr bool operator==(Link, Link) = default;

 private:
  LinkKind kind_;
};

inline LinkValues link_eval(const Link& link, double t) noexcept { return link.eval(t); }

struct MleOptions {
  double tol = 1e-10;
  int max_iter = 100;
  int max_halvings = 30;
  double separation_norm = 1e3;
};

/// Fitted single-index propensity model.
struct PropensityFit {
  Link link = Link::logit();
  Eigen::VectorXd theta;
  Eigen::MatrixXd vtheta;
  double loglik = 0.0;
  int iterations = 0;
  bool converged = false;
  double grad_sup_norm = 0.0;
  std::size_t n = 0;
};

namespace detail {

inline void check_design(const Eigen::MatrixXd& x, std::span<const int> d, const Eigen::VectorXd& theta) {
  if (static_cast<std::size_t>(x.rows()) != d.size()) {
    throw Error(ErrorKind::LengthMismatch, "design rows do not match treatment length");
  }
  if (x.cols() != theta.size()) {
    throw Error(ErrorKind::DimensionMismatch, "design has " + std::to_string(x.cols()) +
                                                  " columns, theta has " + std::to_string(theta.size()));
  }
}

}  // namespace detail

/// Bernoulli log-likelihood sum_i [d_i log g(t_i) + (1 - d_i) log(1 - g(t_i))].
inline double log_likelihood(const Eigen::MatrixXd& x, std::span<const int> d, const Link& link,
                             const Eigen::VectorXd& theta) {
  detail::check_design(x, d, theta);
  const Eigen::VectorXd index = x * theta;
  long double sum = 0.0L;
  for (Eigen::Index i = 0; i < index.size(); ++i) {
    sum += link.log_g(d[static_cast<std::size_t>(i)] == 1 ? index(i) : -index(i));
  }
  return static_cast<double>(sum);
}

/// Gradient of the log-likelihood in theta.
inline Eigen::VectorXd score(const Eigen::MatrixXd& x, std::span<const int> d, const Link& link,
                             const Eigen::VectorXd& theta) {
  detail::check_design(x, d, theta);
  const Eigen::VectorXd index = x * theta;
  std::vector<long double> acc(static_cast<std::size_t>(x.cols()), 0.0L);
  for (Eigen::Index i = 0; i < index.size(); ++i) {
    const double t = index(i);
    const double s = d[static_cast<std::size_t>(i)] == 1 ? link.ratio(t) : -link.ratio(-t);
    for (Eigen::Index k = 0; k < x.cols(); ++k) acc[static_cast<std::size_t>(k)] += s * x(i, k);
  }
  Eigen::VectorXd out(x.cols());
  for (Eigen::Index k = 0; k < x.cols(); ++k) out(k) = static_cast<double>(acc[static_cast<std::size_t>(k)]);
  return out;
}

/// Hessian of the log-likelihood in theta (negative semidefinite for both links).
inline Eigen::MatrixXd hessian(const Eigen::MatrixXd& x, std::span<const int> d, const Link& link,
                               const Eigen::VectorXd& theta) {
  detail::check_design(x, d, theta);
  const Eigen::VectorXd index = x * theta;
  Eigen::VectorXd w(index.size());
  for (Eigen::Index i = 0; i < index.size(); ++i) {
    const double t = index(i);
    if (d[static_cast<std::size_t>(i)] == 1) {
      const double r = link.ratio(t);
      w(i) = r * (link.curvature(t) - r);
    } else {
      const double r = link.ratio(-t);
      w(i) = -r * (link.curvature(t) + r);
    }
  }
  return x.transpose() * w.asDiagonal() * x;
}

/// Inverse of the average Fisher information
/// (1/n) sum_i g'(t_i)^2 / (g(t_i)(1 - g(t_i))) x_i x_i^T, symmetrized.
inline Eigen::MatrixXd vtheta_hat(const Eigen::MatrixXd& x, const Link& link, const Eigen::VectorXd& theta) {
  if (x.cols() != theta.size()) {
    throw Error(ErrorKind::DimensionMismatch, "design columns do not match theta length");
  }
  const auto n = static_cast<double>(x.rows());
  if (x.rows() == 0) throw Error(ErrorKind::TooSmall, "empty design");
  const Eigen::VectorXd index = x * theta;
  Eigen::VectorXd w(index.size());
  for (Eigen::Index i = 0; i < index.size(); ++i) w(i) = link.information_weight(index(i));
  Eigen::MatrixXd info = x.transpose() * w.asDiagonal() * x / n;
  info = 0.5 * (info + info.transpose()).eval();
  const Eigen::MatrixXd gram = x.transpose() * x / n;
  const double scale = std::max(gram.diagonal().maxCoeff(), 1e-300);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(info);
  if (eig.info() != Eigen::Success || eig.eigenvalues().minCoeff() <= 1e-13 * scale) {
    throw Error(ErrorKind::SingularInformation, "information matrix is singular at this theta");
  }
  const auto& v = eig.eigenvectors();
  Eigen::MatrixXd inv = v * eig.eigenvalues().cwiseInverse().asDiagonal() * v.transpose();
  return 0.5 * (inv + inv.transpose());
}

/// Maximum-likelihood fit by Newton's method with step halving, started at
/// theta = 0.
inline PropensityFit fit_mle(const Eigen::MatrixXd& x, std::span<const int> d, const Link& link,
                             const MleOptions& opts = {}) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (n != d.size()) throw Error(ErrorKind::LengthMismatch, "design rows do not match treatment length");
  const auto treated = static_cast<std::size_t>(std::count(d.begin(), d.end(), 1));
  if (treated == 0 || treated == n) throw Error(ErrorKind::EmptyGroup, "both treatment groups are required");

  const Eigen::MatrixXd gram = x.transpose() * x;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> gram_eig(gram);
  const double gmax = gram_eig.eigenvalues().maxCoeff();
  if (!(gmax > 0) || gram_eig.eigenvalues().minCoeff() <= 1e-10 * gmax) {
    throw Error(ErrorKind::RankDeficient, "design matrix does not have full column rank");
  }

  PropensityFit fit;
  fit.link = link;
  fit.n = n;
  fit.theta = Eigen::VectorXd::Zero(x.cols());
  fit.loglik = log_likelihood(x, d, link, fit.theta);

  const auto separated = [&](const Eigen::VectorXd& theta) {
    const Eigen::VectorXd index = x * theta;
    for (Eigen::Index i = 0; i < index.size(); ++i) {
      const double t = d[static_cast<std::size_t>(i)] == 1 ? index(i) : -index(i);
      if (link.log_g(t) < -1e-8) return false;
    }
    return true;
  };

  for (int iter = 0;; ++iter) {
    const Eigen::VectorXd grad = score(x, d, link, fit.theta);
    fit.grad_sup_norm = grad.cwiseAbs().maxCoeff();
    fit.iterations = iter;
    if (fit.theta.norm() > opts.separation_norm || separated(fit.theta)) {
      throw Error(ErrorKind::Separation, "log-likelihood is unbounded; the groups are separated");
    }
    if (fit.grad_sup_norm <= opts.tol) {
      fit.converged = true;
      break;
    }
    if (iter >= opts.max_iter) break;

    const Eigen::MatrixXd neg_hess = -hessian(x, d, link, fit.theta);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(neg_hess);
    Eigen::VectorXd step;
    if (ldlt.info() == Eigen::Success && ldlt.isPositive() && ldlt.vectorD().minCoeff() > 0) {
      step = ldlt.solve(grad);
    }
    if (step.size() == 0 || !step.allFinite()) {
      if (iter == 0) throw Error(ErrorKind::RankDeficient, "singular Hessian at the starting value");
      // Fall back to the expected information when the observed one degenerates.
      const Eigen::VectorXd index = x * fit.theta;
      Eigen::VectorXd w(index.size());
      for (Eigen::Index i = 0; i < index.size(); ++i) w(i) = link.information_weight(index(i));
      const Eigen::MatrixXd info = x.transpose() * w.asDiagonal() * x;
      step = info.ldlt().solve(grad);
      if (!step.allFinite()) throw Error(ErrorKind::NoConvergence, "Newton step is not finite");
    }

    double scale = 1.0;
    bool improved = false;
    for (int h = 0; h <= opts.max_halvings; ++h, scale *= 0.5) {
      const Eigen::VectorXd candidate = fit.theta + scale * step;
      const double ll = log_likelihood(x, d, link, candidate);
      if (std::isfinite(ll) && ll >= fit.loglik) {
        fit.theta = candidate;
        fit.loglik = ll;
        improved = true;
        break;
      }
    }
    if (!improved) {
      // No ascent along the Newton direction: we are at the optimum up to
      // rounding. Report the final gradient honestly.
      const Eigen::VectorXd g = score(x, d, link, fit.theta);
      fit.grad_sup_norm = g.cwiseAbs().maxCoeff();
      fit.converged = fit.grad_sup_norm <= opts.tol;
      fit.iterations = iter + 1;
      break;
    }
  }
  if (!fit.converged) {
    throw Error(ErrorKind::NoConvergence,
                "score sup-norm " + std::to_string(fit.grad_sup_norm) + " after " +
                    std::to_string(fit.iterations) + " iterations");
  }
  fit.vtheta = vtheta_hat(x, link, fit.theta);
  return fit;
}

inline PropensityFit fit_mle(const ObservationTable& table, const Link& link, const MleOptions& opts = {}) {
  return fit_mle(table.design(), table.d(), link, opts);
}

/// Clamped scores g(theta^T x_i) for each row of `x_rows`.
inline std::vector<double> predict(const Eigen::VectorXd& theta, const Link& link,
                                   const Eigen::MatrixXd& x_rows) {
  if (x_rows.cols() != theta.size()) {
    throw Error(ErrorKind::DimensionMismatch, "rows have " + std::to_string(x_rows.cols()) +
                                                  " columns, theta has " + std::to_string(theta.size()));
  }
  const Eigen::VectorXd index = x_rows * theta;
  std::vector<double> out(static_cast<std::size_t>(index.size()));
  for (Eigen::Index i = 0; i < index.size(); ++i) out[static_cast<std::size_t>(i)] = link(index(i));
  return out;
}

inline std::vector<double> predict(const PropensityFit& fit, const Eigen::MatrixXd& x_rows) {
  return predict(fit.theta, fit.link, x_rows);
}

}  // namespace caliper
