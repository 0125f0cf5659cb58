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

#include <optional>
#include <string>

#include <Eigen/Dense>
#include "json.hpp"

#include "caliper/inference.hpp"

namespace caliper {

inline constexpr const char* kReportSchema = "caliper-match/1";

namespace detail {

using nlohmann::json;

inline json to_json_vector(const Eigen::VectorXd& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

inline Eigen::VectorXd vector_from_json(const json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

inline json to_json_matrix(const Eigen::MatrixXd& m) {
  json out = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) out.push_back(to_json_vector(m.row(r).transpose()));
  return out;
}

inline Eigen::MatrixXd matrix_from_json(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j[static_cast<std::size_t>(r)].size()) != cols) {
      throw Error(ErrorKind::SchemaMismatch, "ragged matrix in report");
    }
    m.row(r) = vector_from_json(j[static_cast<std::size_t>(r)]).transpose();
  }
  return m;
}

template <class T>
json optional_to_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

template <class T>
std::optional<T> optional_from_json(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<T>();
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const Interval& v) { j = nlohmann::json{{"lo", v.lo}, {"hi", v.hi}}; }
inline void from_json(const nlohmann::json& j, Interval& v) {
  v.lo = j.at("lo").get<double>();
  v.hi = j.at("hi").get<double>();
}

inline void to_json(nlohmann::json& j, const PointEstimates& e) {
  j = nlohmann::json{{"tau_hat", e.tau_hat},     {"tau_t_hat", e.tau_t_hat}, {"n", e.n},
                     {"n_used_ate", e.n_used_ate}, {"n1", e.n1},             {"p1_hat", e.p1_hat},
                     {"unmatched_treated", e.unmatched_treated}};
}
inline void from_json(const nlohmann::json& j, PointEstimates& e) {
  j.at("tau_hat").get_to(e.tau_hat);
  j.at("tau_t_hat").get_to(e.tau_t_hat);
  j.at("n").get_to(e.n);
  j.at("n_used_ate").get_to(e.n_used_ate);
  j.at("n1").get_to(e.n1);
  j.at("p1_hat").get_to(e.p1_hat);
  j.at("unmatched_treated").get_to(e.unmatched_treated);
}

inline void to_json(nlohmann::json& j, const MatchDiagnostics& m) {
  j = nlohmann::json{{"min_m", m.min_m},
                     {"max_m", m.max_m},
                     {"mean_m", m.mean_m},
                     {"unmatched", m.unmatched},
                     {"unmatched_treated", m.unmatched_treated},
                     {"unmatched_control", m.unmatched_control},
                     {"delta", m.delta}};
}
inline void from_json(const nlohmann::json& j, MatchDiagnostics& m) {
  j.at("min_m").get_to(m.min_m);
  j.at("max_m").get_to(m.max_m);
  j.at("mean_m").get_to(m.mean_m);
  j.at("unmatched").get_to(m.unmatched);
  j.at("unmatched_treated").get_to(m.unmatched_treated);
  j.at("unmatched_control").get_to(m.unmatched_control);
  j.at("delta").get_to(m.delta);
}

inline void to_json(nlohmann::json& j, const KernelBandwidths& b) {
  j = nlohmann::json{{"kappa0_score", detail::optional_to_json(b.kappa0_score)},
                     {"kappa0_index", detail::optional_to_json(b.kappa0_index)},
                     {"kappa1", b.kappa1},
                     {"alpha", b.alpha},
                     {"beta", b.beta},
                     {"truncate_tails", b.truncate_tails}};
}
inline void from_json(const nlohmann::json& j, KernelBandwidths& b) {
  b.kappa0_score = detail::optional_from_json<double>(j.at("kappa0_score"));
  b.kappa0_index = detail::optional_from_json<double>(j.at("kappa0_index"));
  j.at("kappa1").get_to(b.kappa1);
  j.at("alpha").get_to(b.alpha);
  j.at("beta").get_to(b.beta);
  j.at("truncate_tails").get_to(b.truncate_tails);
}

inline void to_json(nlohmann::json& j, const ResolvedBandwidths& b) {
  j = nlohmann::json{{"n", b.n},
                     {"kappa0_score", b.kappa0_score},
                     {"kappa0_index", b.kappa0_index},
                     {"gamma_score", b.gamma_score},
                     {"gamma_index", b.gamma_index},
                     {"a_n", b.a_n}};
}
inline void from_json(const nlohmann::json& j, ResolvedBandwidths& b) {
  j.at("n").get_to(b.n);
  j.at("kappa0_score").get_to(b.kappa0_score);
  j.at("kappa0_index").get_to(b.kappa0_index);
  j.at("gamma_score").get_to(b.gamma_score);
  j.at("gamma_index").get_to(b.gamma_index);
  j.at("a_n").get_to(b.a_n);
}

inline void to_json(nlohmann::json& j, const VarianceFlags& f) {
  j = nlohmann::json{{"v_tau", f.v_tau},
                     {"v_sigma_pi", f.v_sigma_pi},
                     {"theta_term", f.theta_term},
                     {"v_tau_t", f.v_tau_t},
                     {"v_t_sigma_pi", f.v_t_sigma_pi},
                     {"theta_term_t", f.theta_term_t},
                     {"sigma2_clamped", f.sigma2_clamped}};
}
inline void from_json(const nlohmann::json& j, VarianceFlags& f) {
  j.at("v_tau").get_to(f.v_tau);
  j.at("v_sigma_pi").get_to(f.v_sigma_pi);
  j.at("theta_term").get_to(f.theta_term);
  j.at("v_tau_t").get_to(f.v_tau_t);
  j.at("v_t_sigma_pi").get_to(f.v_t_sigma_pi);
  j.at("theta_term_t").get_to(f.theta_term_t);
  j.at("sigma2_clamped").get_to(f.sigma2_clamped);
}

inline void to_json(nlohmann::json& j, const VarianceReport& v) {
  j = nlohmann::json{{"v_tau", v.v_tau},
                     {"v_sigma_pi", v.v_sigma_pi},
                     {"theta_term", v.theta_term},
                     {"v_tau_t", v.v_tau_t},
                     {"v_t_sigma_pi", v.v_t_sigma_pi},
                     {"theta_term_t", v.theta_term_t},
                     {"raw_v_tau", v.raw_v_tau},
                     {"raw_v_sigma_pi", v.raw_v_sigma_pi},
                     {"raw_theta_term", v.raw_theta_term},
                     {"raw_v_tau_t", v.raw_v_tau_t},
                     {"raw_v_t_sigma_pi", v.raw_v_t_sigma_pi},
                     {"raw_theta_term_t", v.raw_theta_term_t},
                     {"q_hat_1", detail::to_json_vector(v.q_hat_1)},
                     {"q_hat_0", detail::to_json_vector(v.q_hat_0)},
                     {"q_hat_t1", detail::to_json_vector(v.q_hat_t1)},
                     {"q_hat_t0", detail::to_json_vector(v.q_hat_t0)},
                     {"v_total_ate", v.v_total_ate},
                     {"v_total_att", v.v_total_att},
                     {"p1_hat", v.p1_hat},
                     {"theta_scale", v.theta_scale},
                     {"estimated_scores", v.estimated_scores},
                     {"clamped", v.clamped},
                     {"bandwidths", v.bandwidths},
                     {"window_lo", v.window_lo},
                     {"window_hi", v.window_hi},
                     {"n_hat", v.n_hat},
                     {"n", v.n}};
}
inline void from_json(const nlohmann::json& j, VarianceReport& v) {
  j.at("v_tau").get_to(v.v_tau);
  j.at("v_sigma_pi").get_to(v.v_sigma_pi);
  j.at("theta_term").get_to(v.theta_term);
  j.at("v_tau_t").get_to(v.v_tau_t);
  j.at("v_t_sigma_pi").get_to(v.v_t_sigma_pi);
  j.at("theta_term_t").get_to(v.theta_term_t);
  j.at("raw_v_tau").get_to(v.raw_v_tau);
  j.at("raw_v_sigma_pi").get_to(v.raw_v_sigma_pi);
  j.at("raw_theta_term").get_to(v.raw_theta_term);
  j.at("raw_v_tau_t").get_to(v.raw_v_tau_t);
  j.at("raw_v_t_sigma_pi").get_to(v.raw_v_t_sigma_pi);
  j.at("raw_theta_term_t").get_to(v.raw_theta_term_t);
  v.q_hat_1 = detail::vector_from_json(j.at("q_hat_1"));
  v.q_hat_0 = detail::vector_from_json(j.at("q_hat_0"));
  v.q_hat_t1 = detail::vector_from_json(j.at("q_hat_t1"));
  v.q_hat_t0 = detail::vector_from_json(j.at("q_hat_t0"));
  j.at("v_total_ate").get_to(v.v_total_ate);
  j.at("v_total_att").get_to(v.v_total_att);
  j.at("p1_hat").get_to(v.p1_hat);
  j.at("theta_scale").get_to(v.theta_scale);
  j.at("estimated_scores").get_to(v.estimated_scores);
  j.at("clamped").get_to(v.clamped);
  j.at("bandwidths").get_to(v.bandwidths);
  j.at("window_lo").get_to(v.window_lo);
  j.at("window_hi").get_to(v.window_hi);
  j.at("n_hat").get_to(v.n_hat);
  j.at("n").get_to(v.n);
}

inline void to_json(nlohmann::json& j, const FitSummary& f) {
  j = nlohmann::json{{"theta", detail::to_json_vector(f.theta)},
                     {"vtheta", detail::to_json_matrix(f.vtheta)},
                     {"loglik", f.loglik},
                     {"iterations", f.iterations},
                     {"grad_sup_norm", f.grad_sup_norm},
                     {"n_fit", f.n_fit}};
}
inline void from_json(const nlohmann::json& j, FitSummary& f) {
  f.theta = detail::vector_from_json(j.at("theta"));
  f.vtheta = detail::matrix_from_json(j.at("vtheta"));
  j.at("loglik").get_to(f.loglik);
  j.at("iterations").get_to(f.iterations);
  j.at("grad_sup_norm").get_to(f.grad_sup_norm);
  j.at("n_fit").get_to(f.n_fit);
}

inline void to_json(nlohmann::json& j, const EstimationReport& r) {
  j = nlohmann::json{
      {"schema", kReportSchema},
      {"mode", std::string(to_string(r.mode))},
      {"estimates", r.estimates},
      {"variance", r.variance},
      {"ci_ate", r.ci_ate},
      {"ci_att", r.ci_att},
      {"alpha", r.alpha},
      {"z", r.z},
      {"n_input", r.n_input},
      {"n_estimation", r.n_estimation},
      {"matches", r.matches},
      {"fit", r.fit ? nlohmann::json(*r.fit) : nlohmann::json(nullptr)},
      {"split_attempts", r.split_attempts},
      {"config",
       {{"link", r.link},
        {"caliper_rule", r.caliper_rule},
        {"caliper_s", r.caliper_s},
        {"caliper_override", detail::optional_to_json(r.caliper_override)},
        {"bandwidths", r.bandwidths},
        {"seed", r.seed}}},
  };
}

inline void from_json(const nlohmann::json& j, EstimationReport& r) {
  if (j.at("schema").get<std::string>() != kReportSchema) {
    throw Error(ErrorKind::SchemaMismatch, "unsupported report schema " + j.at("schema").dump());
  }
  const auto mode = j.at("mode").get<std::string>();
  if (mode != "known" && mode != "estimated") throw Error(ErrorKind::SchemaMismatch, "unknown mode " + mode);
  r.mode = mode == "known" ? ScoreMode::Known : ScoreMode::Estimated;
  j.at("estimates").get_to(r.estimates);
  j.at("variance").get_to(r.variance);
  j.at("ci_ate").get_to(r.ci_ate);
  j.at("ci_att").get_to(r.ci_att);
  j.at("alpha").get_to(r.alpha);
  j.at("z").get_to(r.z);
  j.at("n_input").get_to(r.n_input);
  j.at("n_estimation").get_to(r.n_estimation);
  j.at("matches").get_to(r.matches);
  r.fit = detail::optional_from_json<FitSummary>(j.at("fit"));
  j.at("split_attempts").get_to(r.split_attempts);
  const auto& c = j.at("config");
  c.at("link").get_to(r.link);
  c.at("caliper_rule").get_to(r.caliper_rule);
  c.at("caliper_s").get_to(r.caliper_s);
  r.caliper_override = detail::optional_from_json<double>(c.at("caliper_override"));
  c.at("bandwidths").get_to(r.bandwidths);
  c.at("seed").get_to(r.seed);
}

/// Serialized report; keys are sorted so equal reports give equal bytes.
inline std::string report_to_string(const EstimationReport& r, int indent = 2) {
  return nlohmann::json(r).dump(indent);
}

inline EstimationReport report_from_string(const std::string& text) {
  try {
    return nlohmann::json::parse(text).get<EstimationReport>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::SchemaMismatch, e.what());
  }
}

}  // namespace caliper
