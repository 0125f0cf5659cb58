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
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "caliper/dgp.hpp"
#include "caliper/inference.hpp"
#include "caliper/matching.hpp"
#include "caliper/parallel.hpp"
#include "caliper/random.hpp"

namespace caliper {

/// O(n^2) literal evaluation of the match sets, for testing. Sets are sorted.
inline std::vector<std::vector<std::size_t>> brute_force_match_oracle(std::span<const double> scores,
                                                                      std::span<const int> d, double delta) {
  if (scores.size() > 10000) throw Error(ErrorKind::TooLarge, "brute-force oracle is limited to n <= 10^4");
  if (scores.size() != d.size()) throw Error(ErrorKind::LengthMismatch, "scores and treatment differ in length");
  std::vector<std::vector<std::size_t>> sets(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (d[j] != d[i] && std::fabs(scores[j] - scores[i]) <= delta) sets[i].push_back(j);
    }
  }
  return sets;
}

struct CoverageRow {
  std::size_t rep = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string failure;
  double tau_hat = 0, tau_t_hat = 0;
  double v_ate = 0, v_att = 0;
  double v_known_ate = 0, v_known_att = 0;  ///< totals without the theta-terms
  double theta_term = 0, theta_term_t = 0;
  Interval ci_ate, ci_att;
  bool covered_ate = false, covered_att = false;
  std::size_t n_estimation = 0, n_hat = 0;
};

struct CoverageSummary {
  std::size_t n = 0;
  std::size_t reps = 0;
  double alpha = 0.05;
  ScoreMode mode = ScoreMode::Estimated;
  std::uint64_t seed = 0;
  double tau = 0, tau_t = 0;
  std::size_t completed = 0;
  std::map<std::string, std::size_t> failures;
  double coverage_ate = 0, coverage_att = 0;
  double mean_halfwidth_ate = 0, mean_halfwidth_att = 0;
  double mean_tau_hat = 0, mean_tau_t_hat = 0;
  double sd_tau_hat = 0, sd_tau_t_hat = 0;
  double mean_v_ate = 0, mean_v_att = 0;
  double mean_v_known_ate = 0, mean_theta_term = 0;
  double median_n_hat_ratio = 0;
  std::vector<CoverageRow> rows;
};

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const auto m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  long double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<long double>(v.size());
  long double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return static_cast<double>(std::sqrt(ss / static_cast<long double>(v.size() - 1)));
}

}  // namespace detail

/// Runs the pipeline on `reps` fresh draws of size n. Known mode uses the
/// whole draw with its true scores; estimated mode splits it in halves.
/// Failed replications are counted by reason and excluded from the averages.
inline CoverageSummary coverage_experiment(const AdmissibleDgp& dgp, std::size_t n, std::size_t reps, double alpha,
                                           ScoreMode mode, std::uint64_t seed, PipelineConfig config = {},
                                           unsigned threads = 1) {
  dgp.validate();
  if (reps < 1) throw Error(ErrorKind::InvalidArgument, "reps must be >= 1");
  config.alpha = alpha;
  config.threads = 1;
  config.validate();
  CoverageSummary s;
  s.n = n;
  s.reps = reps;
  s.alpha = alpha;
  s.mode = mode;
  s.seed = seed;
  s.tau = dgp.tau();
  s.tau_t = true_tau_t(dgp, 1000000, derive_seed(seed, 0xA77ULL));
  s.rows.resize(reps);

  parallel_for(reps, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) {
      auto& row = s.rows[r];
      row.rep = r;
      row.seed = derive_seed(seed, r);
      try {
        const auto sample = draw_sample(dgp, n, row.seed);
        const auto rep = mode == ScoreMode::Known
                             ? run_known_score_pipeline(sample.table, sample.scores, config, row.seed)
                             : run_pipeline(sample.table, config, derive_seed(row.seed, 1));
        row.tau_hat = rep.estimates.tau_hat;
        row.tau_t_hat = rep.estimates.tau_t_hat;
        row.v_ate = rep.variance.v_total_ate;
        row.v_att = rep.variance.v_total_att;
        row.theta_term = rep.variance.theta_term;
        row.theta_term_t = rep.variance.theta_term_t;
        row.v_known_ate = row.v_ate - row.theta_term;
        row.v_known_att = row.v_att - row.theta_term_t;
        row.ci_ate = rep.ci_ate;
        row.ci_att = rep.ci_att;
        row.covered_ate = rep.ci_ate.contains(s.tau);
        row.covered_att = rep.ci_att.contains(s.tau_t);
        row.n_estimation = rep.n_estimation;
        row.n_hat = rep.variance.n_hat;
        row.ok = true;
      } catch (const Error& e) {
        row.failure = (e.stage().empty() ? "" : e.stage() + ":") + std::string(to_string(e.kind()));
      }
    }
  });

  std::vector<double> th, tt, ratio;
  double cov_a = 0, cov_t = 0, hw_a = 0, hw_t = 0, va = 0, vt = 0, vk = 0, tht = 0;
  for (const auto& row : s.rows) {
    if (!row.ok) {
      ++s.failures[row.failure];
      continue;
    }
    ++s.completed;
    th.push_back(row.tau_hat);
    tt.push_back(row.tau_t_hat);
    ratio.push_back(static_cast<double>(row.n_hat) / static_cast<double>(row.n_estimation));
    cov_a += row.covered_ate;
    cov_t += row.covered_att;
    hw_a += row.ci_ate.halfwidth();
    hw_t += row.ci_att.halfwidth();
    va += row.v_ate;
    vt += row.v_att;
    vk += row.v_known_ate;
    tht += row.theta_term;
  }
  if (s.completed > 0) {
    const double c = static_cast<double>(s.completed);
    s.coverage_ate = cov_a / c;
    s.coverage_att = cov_t / c;
    s.mean_halfwidth_ate = hw_a / c;
    s.mean_halfwidth_att = hw_t / c;
    long double a = 0, b = 0;
    for (std::size_t i = 0; i < th.size(); ++i) {
      a += th[i];
      b += tt[i];
    }
    s.mean_tau_hat = static_cast<double>(a / th.size());
    s.mean_tau_t_hat = static_cast<double>(b / tt.size());
    s.sd_tau_hat = detail::sample_sd(th);
    s.sd_tau_t_hat = detail::sample_sd(tt);
    s.mean_v_ate = va / c;
    s.mean_v_att = vt / c;
    s.mean_v_known_ate = vk / c;
    s.mean_theta_term = tht / c;
    s.median_n_hat_ratio = detail::median(ratio);
  }
  return s;
}

struct GrowthRow {
  std::size_t n = 0;
  std::size_t reps = 0;
  std::size_t completed = 0;
  double median_min_m = 0, median_max_m = 0;
  double median_min_over_log_n = 0, median_max_over_log_n = 0;
  double frac_min_ge1 = 0;
  std::size_t violations = 0;  ///< reps with min M_i = 0 under the data-dependent rule
};

/// Match-count statistics per sample size. Known mode matches on the true
/// scores of the full draw; estimated mode matches the estimation half on
/// fitted scores.
inline std::vector<GrowthRow> matches_growth_experiment(const AdmissibleDgp& dgp, const std::vector<std::size_t>& levels,
                                                        std::size_t reps, const CaliperRule& rule, std::uint64_t seed,
                                                        ScoreMode mode = ScoreMode::Known, unsigned threads = 1) {
  dgp.validate();
  if (!std::is_sorted(levels.begin(), levels.end()) ||
      std::adjacent_find(levels.begin(), levels.end()) != levels.end()) {
    throw Error(ErrorKind::InvalidArgument, "n levels must be strictly increasing");
  }
  if (reps < 1 && !levels.empty()) throw Error(ErrorKind::InvalidArgument, "reps must be >= 1");
  std::vector<GrowthRow> out;
  for (std::size_t li = 0; li < levels.size(); ++li) {
    const auto n = levels[li];
    struct Rep {
      bool ok = false;
      double min_m = 0, max_m = 0, log_n = 1;
    };
    std::vector<Rep> res(reps);
    parallel_for(reps, threads, [&](std::size_t begin, std::size_t end) {
      for (std::size_t r = begin; r < end; ++r) {
        try {
          const auto rs = derive_seed(derive_seed(seed, li), r);
          const auto sample = draw_sample(dgp, n, rs);
          std::vector<double> scores;
          std::vector<int> d;
          if (mode == ScoreMode::Known) {
            scores = sample.scores;
            d.assign(sample.table.d().begin(), sample.table.d().end());
          } else {
            const auto split = split_sample(sample.table, derive_seed(rs, 1));
            const auto fit = fit_mle(split.fit_half, dgp.link);
            scores = predict(fit, split.estimate_half.design());
            d.assign(split.estimate_half.d().begin(), split.estimate_half.d().end());
          }
          const double delta = caliper_value(rule, scores, d);
          const auto diag = match_diagnostics(build_match_index(scores, d, delta));
          res[r] = {true, static_cast<double>(diag.min_m), static_cast<double>(diag.max_m),
                    std::log(static_cast<double>(scores.size()))};
        } catch (const Error&) {
          res[r].ok = false;
        }
      }
    });
    GrowthRow row;
    row.n = n;
    row.reps = reps;
    std::vector<double> mins, maxs, min_ratio, max_ratio;
    std::size_t ge1 = 0;
    for (const auto& r : res) {
      if (!r.ok) continue;
      ++row.completed;
      mins.push_back(r.min_m);
      maxs.push_back(r.max_m);
      min_ratio.push_back(r.min_m / r.log_n);
      max_ratio.push_back(r.max_m / r.log_n);
      if (r.min_m >= 1) ++ge1;
    }
    row.median_min_m = detail::median(mins);
    row.median_max_m = detail::median(maxs);
    row.median_min_over_log_n = detail::median(min_ratio);
    row.median_max_over_log_n = detail::median(max_ratio);
    row.frac_min_ge1 = row.completed ? static_cast<double>(ge1) / static_cast<double>(row.completed) : 0.0;
    if (rule.kind == CaliperRule::Kind::DataDependent) row.violations = row.completed - ge1;
    out.push_back(row);
  }
  return out;
}

struct Verdict {
  bool pass = true;
  std::vector<std::string> lines;

  void check(bool ok, std::string what) {
    pass = pass && ok;
    lines.push_back(std::string(ok ? "PASS " : "FAIL ") + std::move(what));
  }
};

/// Coverage of both intervals in [0.915, 0.980] and no detectable ATE bias.
inline Verdict coverage_verdict(const CoverageSummary& s) {
  Verdict v;
  const auto in_band = [](double c) { return c >= 0.915 && c <= 0.980; };
  v.check(s.completed == s.reps, "all replications completed (" + std::to_string(s.completed) + "/" +
                                     std::to_string(s.reps) + ")");
  v.check(in_band(s.coverage_ate), "ATE coverage " + std::to_string(s.coverage_ate) + " in [0.915, 0.980]");
  v.check(in_band(s.coverage_att), "ATT coverage " + std::to_string(s.coverage_att) + " in [0.915, 0.980]");
  const double bound = s.completed ? 3.0 * s.sd_tau_hat / std::sqrt(static_cast<double>(s.completed)) : 0.0;
  v.check(std::fabs(s.mean_tau_hat - s.tau) <= bound,
          "|mean tau_hat - tau| = " + std::to_string(std::fabs(s.mean_tau_hat - s.tau)) + " <= " +
              std::to_string(bound));
  return v;
}

/// Growth of max M_i like log n across levels, and min M_i >= 1 becoming
/// typical (fixed rule) or holding always (data-dependent rule).
inline Verdict growth_verdict(const std::vector<GrowthRow>& rows, const CaliperRule& rule) {
  Verdict v;
  if (rows.empty()) return v;
  if (rule.kind == CaliperRule::Kind::DataDependent) {
    std::size_t viol = 0;
    for (const auto& r : rows) viol += r.violations;
    v.check(viol == 0, "min M_i >= 1 in every replication (" + std::to_string(viol) + " violations)");
    return v;
  }
  double lo = rows.front().median_max_over_log_n, hi = lo;
  bool monotone = true;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    lo = std::min(lo, rows[i].median_max_over_log_n);
    hi = std::max(hi, rows[i].median_max_over_log_n);
    if (i > 0 && rows[i].frac_min_ge1 < rows[i - 1].frac_min_ge1) monotone = false;
  }
  v.check(lo > 0 && hi / lo <= 3.0, "median max M_i / log n varies by factor " + std::to_string(hi / lo) + " <= 3");
  v.check(monotone, "fraction of replications with min M_i >= 1 is nondecreasing in n");
  v.check(rows.back().frac_min_ge1 >= 0.95,
          "fraction with min M_i >= 1 at the largest n is " + std::to_string(rows.back().frac_min_ge1) + " >= 0.95");
  return v;
}

inline void to_json(nlohmann::json& j, const CoverageRow& r) {
  j = nlohmann::json{{"rep", r.rep},
                     {"seed", r.seed},
                     {"ok", r.ok},
                     {"failure", r.failure},
                     {"tau_hat", r.tau_hat},
                     {"tau_t_hat", r.tau_t_hat},
                     {"v_ate", r.v_ate},
                     {"v_att", r.v_att},
                     {"theta_term", r.theta_term},
                     {"theta_term_t", r.theta_term_t},
                     {"ci_ate", {r.ci_ate.lo, r.ci_ate.hi}},
                     {"ci_att", {r.ci_att.lo, r.ci_att.hi}},
                     {"covered_ate", r.covered_ate},
                     {"covered_att", r.covered_att},
                     {"n_estimation", r.n_estimation},
                     {"n_hat", r.n_hat}};
}

inline void to_json(nlohmann::json& j, const CoverageSummary& s) {
  j = nlohmann::json{{"schema", "caliper-match/1"},
                     {"experiment", "coverage"},
                     {"n", s.n},
                     {"reps", s.reps},
                     {"alpha", s.alpha},
                     {"mode", std::string(to_string(s.mode))},
                     {"seed", s.seed},
                     {"tau", s.tau},
                     {"tau_t", s.tau_t},
                     {"completed", s.completed},
                     {"failures", s.failures},
                     {"coverage_ate", s.coverage_ate},
                     {"coverage_att", s.coverage_att},
                     {"mean_halfwidth_ate", s.mean_halfwidth_ate},
                     {"mean_halfwidth_att", s.mean_halfwidth_att},
                     {"mean_tau_hat", s.mean_tau_hat},
                     {"mean_tau_t_hat", s.mean_tau_t_hat},
                     {"sd_tau_hat", s.sd_tau_hat},
                     {"sd_tau_t_hat", s.sd_tau_t_hat},
                     {"mean_v_ate", s.mean_v_ate},
                     {"mean_v_att", s.mean_v_att},
                     {"mean_v_known_ate", s.mean_v_known_ate},
                     {"mean_theta_term", s.mean_theta_term},
                     {"median_n_hat_ratio", s.median_n_hat_ratio},
                     {"rows", s.rows}};
}

inline void to_json(nlohmann::json& j, const GrowthRow& r) {
  j = nlohmann::json{{"n", r.n},
                     {"reps", r.reps},
                     {"completed", r.completed},
                     {"median_min_m", r.median_min_m},
                     {"median_max_m", r.median_max_m},
                     {"median_min_over_log_n", r.median_min_over_log_n},
                     {"median_max_over_log_n", r.median_max_over_log_n},
                     {"frac_min_ge1", r.frac_min_ge1},
                     {"violations", r.violations}};
}

namespace detail {

inline std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::FileNotFound, "cannot write " + path.string());
  return out;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// One line per replication.
inline void write_coverage_csv(const CoverageSummary& s, const std::filesystem::path& path) {
  auto out = detail::open_output(path);
  out << "rep,seed,ok,failure,tau_hat,tau_t_hat,v_ate,v_att,theta_term,theta_term_t,ci_ate_lo,ci_ate_hi,"
         "ci_att_lo,ci_att_hi,covered_ate,covered_att,n_estimation,n_hat\n";
  for (const auto& r : s.rows) {
    out << r.rep << ',' << r.seed << ',' << r.ok << ',' << r.failure << ',' << detail::fmt(r.tau_hat) << ','
        << detail::fmt(r.tau_t_hat) << ',' << detail::fmt(r.v_ate) << ',' << detail::fmt(r.v_att) << ','
        << detail::fmt(r.theta_term) << ',' << detail::fmt(r.theta_term_t) << ',' << detail::fmt(r.ci_ate.lo) << ','
        << detail::fmt(r.ci_ate.hi) << ',' << detail::fmt(r.ci_att.lo) << ',' << detail::fmt(r.ci_att.hi) << ','
        << r.covered_ate << ',' << r.covered_att << ',' << r.n_estimation << ',' << r.n_hat << '\n';
  }
}

inline void write_growth_csv(const std::vector<GrowthRow>& rows, const std::filesystem::path& path) {
  auto out = detail::open_output(path);
  out << "n,reps,completed,median_min_m,median_max_m,median_min_over_log_n,median_max_over_log_n,frac_min_ge1,"
         "violations\n";
  for (const auto& r : rows) {
    out << r.n << ',' << r.reps << ',' << r.completed << ',' << detail::fmt(r.median_min_m) << ','
        << detail::fmt(r.median_max_m) << ',' << detail::fmt(r.median_min_over_log_n) << ','
        << detail::fmt(r.median_max_over_log_n) << ',' << detail::fmt(r.frac_min_ge1) << ',' << r.violations << '\n';
  }
}

}  // namespace caliper
