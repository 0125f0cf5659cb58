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

// caliper_match: command-line front end.
//   estimate            point estimates, variances and intervals for a CSV file
//   simulate coverage   interval coverage on simulated draws
//   simulate matches    growth of match counts with the sample size
// Exit status: 0 success, 1 usage error, 2 data, numeric or verdict failure.

#include <cstdint>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "caliper/caliper.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kFailure = 2;

struct BandwidthFlags {
  std::optional<double> kappa0;
  std::optional<double> kappa0_index;
  double kappa1 = 0.1;
  double alpha = 1.0 / 4.5;
  double beta = 1.0 / 4.25;
  bool no_tail_cutoff = false;

  void add(CLI::App* app) {
    app->add_option("--kappa0", kappa0, "Score-space bandwidth scale (default: sd of the scores)")
        ->check(CLI::PositiveNumber);
    app->add_option("--kappa0-index", kappa0_index, "Index-space bandwidth scale (default: sd of the index)")
        ->check(CLI::PositiveNumber);
    app->add_option("--kappa1", kappa1, "Truncation scale")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--bw-alpha", alpha, "Truncation exponent")->capture_default_str();
    app->add_option("--bw-beta", beta, "Bandwidth exponent")->capture_default_str();
    app->add_flag("--no-tail-cutoff", no_tail_cutoff, "Evaluate kernel sums over all units");
  }

  caliper::KernelBandwidths build() const {
    caliper::KernelBandwidths bw;
    bw.kappa0_score = kappa0;
    bw.kappa0_index = kappa0_index;
    bw.kappa1 = kappa1;
    bw.alpha = alpha;
    bw.beta = beta;
    bw.truncate_tails = !no_tail_cutoff;
    return bw;
  }
};

struct CaliperFlags {
  std::string rule = "data-dependent";
  double s = 1.0;
  std::optional<double> delta;

  void add(CLI::App* app, bool allow_delta) {
    app->add_option("--caliper", rule, "Caliper rule")
        ->check(CLI::IsMember({"fixed", "data-dependent"}))
        ->capture_default_str();
    app->add_option("--s", s, "Scale of the fixed caliper s log(n)/n")->check(CLI::PositiveNumber)->capture_default_str();
    if (allow_delta) app->add_option("--delta", delta, "Explicit caliper radius")->check(CLI::PositiveNumber);
  }

  caliper::CaliperRule build() const {
    return rule == "fixed" ? caliper::CaliperRule::fixed(s) : caliper::CaliperRule::data_dependent();
  }
};

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& seed) {
  if (seed) return *seed;
  std::random_device rd;
  return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

caliper::AdmissibleDgp dgp_by_name(const std::string& name, bool heteroskedastic) {
  auto dgp = name == "heterogeneous"  ? caliper::AdmissibleDgp::heterogeneous()
             : name == "single-index" ? caliper::AdmissibleDgp::single_index()
                                      : caliper::AdmissibleDgp::homogeneous();
  if (heteroskedastic) dgp.noise = caliper::NoiseSpec::heteroskedastic(0.3, 0.3, 1);
  return dgp;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw caliper::Error(caliper::ErrorKind::FileNotFound, "cannot write " + path);
  out << text << '\n';
}

void print_summary(const caliper::EstimationReport& r) {
  const auto& e = r.estimates;
  const auto& v = r.variance;
  std::printf("mode            %s (n = %zu, estimation sample = %zu)\n", std::string(to_string(r.mode)).c_str(),
              r.n_input, r.n_estimation);
  std::printf("ATE             %.6f  %.0f%% CI [%.6f, %.6f]  V = %.6f\n", e.tau_hat, 100 * (1 - r.alpha), r.ci_ate.lo,
              r.ci_ate.hi, v.v_total_ate);
  std::printf("ATT             %.6f  %.0f%% CI [%.6f, %.6f]  V = %.6f\n", e.tau_t_hat, 100 * (1 - r.alpha),
              r.ci_att.lo, r.ci_att.hi, v.v_total_att);
  std::printf("components      V_tau %.6f  V_sigma %.6f  theta %.6f | ATT %.6f %.6f %.6f\n", v.v_tau, v.v_sigma_pi,
              v.theta_term, v.v_tau_t, v.v_t_sigma_pi, v.theta_term_t);
  std::printf("matches         delta %.6g  M in [%zu, %zu]  mean %.3f  unmatched %zu (treated %zu)\n",
              r.matches.delta, r.matches.min_m, r.matches.max_m, r.matches.mean_m, r.matches.unmatched,
              r.matches.unmatched_treated);
  std::printf("window          [%.6f, %.6f]  %zu of %zu units\n", v.window_lo, v.window_hi, v.n_hat, v.n);
  const auto& c = v.clamped;
  const std::pair<const char*, bool> flags[] = {{"V_tau", c.v_tau},          {"V_sigma_pi", c.v_sigma_pi},
                                                {"theta_term", c.theta_term}, {"V_tau_t", c.v_tau_t},
                                                {"V_t_sigma_pi", c.v_t_sigma_pi}, {"theta_term_t", c.theta_term_t}};
  for (const auto& [name, on] : flags) {
    if (on) std::printf("warning         %s was negative and clamped to 0\n", name);
  }
  if (c.sigma2_clamped > 0) {
    std::printf("warning         %zu conditional variance estimates clamped to 0\n", c.sigma2_clamped);
  }
  if (e.unmatched_treated > 0) {
    std::printf("warning         %zu treated units have no match\n", e.unmatched_treated);
  }
}

int validate_config(const caliper::PipelineConfig& config, const CLI::App* cmd) {
  try {
    config.validate();
  } catch (const caliper::Error& e) {
    std::cerr << e.what() << "\n\n" << cmd->help();
    return kUsage;
  }
  return kOk;
}

int report_verdict(const caliper::Verdict& v) {
  for (const auto& line : v.lines) std::printf("%s\n", line.c_str());
  std::printf("verdict: %s\n", v.pass ? "PASS" : "FAIL");
  return v.pass ? kOk : kFailure;
}

int run(int argc, char** argv) {
  CLI::App app{"Caliper matching on propensity scores: ATE/ATT estimates, variances and confidence intervals"};
  app.require_subcommand(1);

  // estimate
  auto* est = app.add_subcommand("estimate", "Estimate ATE and ATT from a CSV file");
  std::string csv, y_col, d_col, x_list, known_col, link = "logit", out = "report.json";
  double alpha = 0.05;
  std::optional<std::uint64_t> seed;
  bool intercept = false;
  unsigned threads = 0;
  CaliperFlags est_caliper;
  BandwidthFlags est_bw;
  est->add_option("--csv", csv, "Input CSV with a header row")->required();
  est->add_option("--y", y_col, "Outcome column")->required();
  est->add_option("--d", d_col, "Binary treatment column")->required();
  est->add_option("--x", x_list, "Comma-separated covariate columns");
  est->add_option("--known-scores", known_col, "Column of known propensity scores (skips fitting)");
  est->add_option("--link", link, "Propensity link")->check(CLI::IsMember({"logit", "probit"}))->capture_default_str();
  est->add_option("--alpha", alpha, "Interval level is 1 - alpha")->capture_default_str();
  est->add_option("--seed", seed, "Random seed for sample splitting (default: from entropy)");
  est->add_flag("--intercept", intercept, "Add an intercept column to the propensity model");
  est->add_option("--out", out, "Report path")->capture_default_str();
  est->add_option("--threads", threads, "Worker threads (default: CALIPER_MATCH_THREADS or all cores)");
  est_caliper.add(est, true);
  est_bw.add(est);

  // simulate
  auto* sim = app.add_subcommand("simulate", "Monte Carlo experiments on a built-in design");
  sim->require_subcommand(1);
  std::string dgp_name = "homogeneous", mode = "estimated", out_json, out_csv;
  bool hetero_noise = false, acceptance = false;
  std::optional<std::uint64_t> sim_seed;
  unsigned sim_threads = 0;
  {
    auto* s = sim;
    s->add_option("--dgp", dgp_name, "Design")
        ->check(CLI::IsMember({"homogeneous", "heterogeneous", "single-index"}))
        ->capture_default_str();
    s->add_flag("--heteroskedastic", hetero_noise, "Noise scale 0.3(1 + x2)");
    s->add_option("--mode", mode, "Score mode")->check(CLI::IsMember({"known", "estimated"}))->capture_default_str();
    s->add_option("--seed", sim_seed, "Master seed (default: from entropy)");
    s->add_option("--threads", sim_threads, "Worker threads");
    s->add_option("--json", out_json, "Write the JSON summary here");
    s->add_option("--csv", out_csv, "Write the flat CSV summary here");
    s->add_flag("--acceptance", acceptance, "Check the built-in acceptance thresholds");
  }
  auto* cov = sim->add_subcommand("coverage", "Empirical coverage of the confidence intervals");
  cov->fallthrough();
  std::size_t cov_n = 4000, cov_reps = 400;
  double cov_alpha = 0.05;
  BandwidthFlags cov_bw;
  CaliperFlags cov_caliper;
  cov->add_option("--n", cov_n, "Sample size per replication")->check(CLI::Range(std::size_t{8}, std::size_t{100000000}))->capture_default_str();
  cov->add_option("--reps", cov_reps, "Replications")->check(CLI::PositiveNumber)->capture_default_str();
  cov->add_option("--alpha", cov_alpha, "Interval level is 1 - alpha")->capture_default_str();
  cov_caliper.add(cov, false);
  cov_bw.add(cov);
  auto* mat = sim->add_subcommand("matches", "Minimum and maximum match counts across sample sizes");
  mat->fallthrough();
  std::string levels = "1000,4000,16000";
  std::size_t mat_reps = 50;
  CaliperFlags mat_caliper;
  mat_caliper.rule = "fixed";
  mat->add_option("--levels", levels, "Comma-separated increasing sample sizes")->capture_default_str();
  mat->add_option("--reps", mat_reps, "Replications per level")->check(CLI::PositiveNumber)->capture_default_str();
  mat_caliper.add(mat, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << '\n' << app.help();
    return kUsage;
  }

  if (*est) {
    if (known_col.empty() && x_list.empty()) {
      std::cerr << "estimate: --x is required unless --known-scores is given\n" << est->help();
      return kUsage;
    }
    caliper::PipelineConfig config;
    config.link = caliper::Link::from_name(link);
    config.caliper = est_caliper.build();
    config.delta = est_caliper.delta;
    config.alpha = alpha;
    config.bandwidths = est_bw.build();
    config.threads = caliper::resolve_threads(threads);
    if (const int rc = validate_config(config, est); rc != kOk) return rc;
    const auto s = resolve_seed(seed);
    caliper::EstimationReport report;
    if (!known_col.empty()) {
      std::vector<double> y = caliper::read_csv_column(csv, y_col);
      std::vector<double> dv = caliper::read_csv_column(csv, d_col);
      std::vector<int> d(dv.size());
      for (std::size_t i = 0; i < dv.size(); ++i) {
        if (dv[i] != 0.0 && dv[i] != 1.0) {
          throw caliper::Error(caliper::ErrorKind::NonBinaryTreatment,
                               "row " + std::to_string(i + 1) + " of column " + d_col, "input");
        }
        d[i] = static_cast<int>(dv[i]);
      }
      Eigen::MatrixXd x(static_cast<Eigen::Index>(y.size()), 0);
      const caliper::ObservationTable table(std::move(y), std::move(d), std::move(x));
      const auto scores = caliper::read_csv_column(csv, known_col);
      report = caliper::run_known_score_pipeline(table, scores, config, s);
    } else {
      const caliper::CsvSchema schema{y_col, d_col, split_list(x_list), intercept};
      const auto table = caliper::ingest_csv(csv, schema);
      report = caliper::run_pipeline(table, config, s);
    }
    write_text(out, caliper::report_to_string(report));
    print_summary(report);
    std::printf("report          %s (seed %llu)\n", out.c_str(), static_cast<unsigned long long>(s));
    return kOk;
  }

  const auto dgp = dgp_by_name(dgp_name, hetero_noise);
  const auto score_mode = mode == "known" ? caliper::ScoreMode::Known : caliper::ScoreMode::Estimated;
  const auto master = resolve_seed(sim_seed);
  const auto workers = caliper::resolve_threads(sim_threads);
  if (*cov) {
    caliper::PipelineConfig config;
    config.link = dgp.link;
    config.caliper = cov_caliper.build();
    config.bandwidths = cov_bw.build();
    config.alpha = cov_alpha;
    if (const int rc = validate_config(config, cov); rc != kOk) return rc;
    const auto summary =
        caliper::coverage_experiment(dgp, cov_n, cov_reps, cov_alpha, score_mode, master, config, workers);
    if (!out_json.empty()) write_text(out_json, nlohmann::json(summary).dump(2));
    if (!out_csv.empty()) caliper::write_coverage_csv(summary, out_csv);
    std::printf("coverage  n=%zu reps=%zu mode=%s seed=%llu\n", cov_n, cov_reps, mode.c_str(),
                static_cast<unsigned long long>(master));
    std::printf("completed %zu of %zu\n", summary.completed, summary.reps);
    for (const auto& [reason, count] : summary.failures) std::printf("failed    %s x %zu\n", reason.c_str(), count);
    std::printf("ATE       coverage %.4f  mean %.6f  sd %.6f  mean halfwidth %.6f  (tau %.6f)\n",
                summary.coverage_ate, summary.mean_tau_hat, summary.sd_tau_hat, summary.mean_halfwidth_ate,
                summary.tau);
    std::printf("ATT       coverage %.4f  mean %.6f  sd %.6f  mean halfwidth %.6f  (tau_t %.6f)\n",
                summary.coverage_att, summary.mean_tau_t_hat, summary.sd_tau_t_hat, summary.mean_halfwidth_att,
                summary.tau_t);
    return acceptance ? report_verdict(caliper::coverage_verdict(summary)) : kOk;
  }
  if (*mat) {
    std::vector<std::size_t> n_levels;
    for (const auto& tok : split_list(levels)) {
      std::size_t pos = 0;
      unsigned long long v = 0;
      try {
        v = std::stoull(tok, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos != tok.size() || v < 2) {
        std::cerr << "simulate matches: bad level '" << tok << "'\n" << mat->help();
        return kUsage;
      }
      if (!n_levels.empty() && v <= n_levels.back()) {
        std::cerr << "simulate matches: levels must be strictly increasing\n" << mat->help();
        return kUsage;
      }
      n_levels.push_back(static_cast<std::size_t>(v));
    }
    const auto rule = mat_caliper.build();
    const auto rows = caliper::matches_growth_experiment(dgp, n_levels, mat_reps, rule, master, score_mode, workers);
    if (!out_json.empty()) {
      nlohmann::json j{{"schema", caliper::kReportSchema}, {"experiment", "matches"}, {"rule", rule.name()},
                       {"s", rule.s},   {"seed", master},       {"rows", rows}};
      write_text(out_json, j.dump(2));
    }
    if (!out_csv.empty()) caliper::write_growth_csv(rows, out_csv);
    std::printf("%10s %8s %8s %10s %10s %12s\n", "n", "min_M", "max_M", "max/log n", "P(min>=1)", "violations");
    for (const auto& r : rows) {
      std::printf("%10zu %8.1f %8.1f %10.3f %10.3f %12zu\n", r.n, r.median_min_m, r.median_max_m,
                  r.median_max_over_log_n, r.frac_min_ge1, r.violations);
    }
    return acceptance ? report_verdict(caliper::growth_verdict(rows, rule)) : kOk;
  }
  return kUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const caliper::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  } catch (...) {
    std::cerr << "error: unknown failure\n";
    return kFailure;
  }
}
