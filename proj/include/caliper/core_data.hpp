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
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <Eigen/Dense>

#include "caliper/error.hpp"
#include "caliper/random.hpp"

namespace caliper {

/// The observed i.i.d. sample (Y, D, X). Immutable once constructed; the
/// constructor enforces equal lengths, binary treatment and finite values.
class ObservationTable {
 public:
  ObservationTable(std::vector<double> y, std::vector<int> d, Eigen::MatrixXd x,
                   bool has_intercept = false, std::vector<std::string> covariate_names = {})
      : y_(std::move(y)),
        d_(std::move(d)),
        x_(std::move(x)),
        has_intercept_(has_intercept),
        names_(std::move(covariate_names)) {
    const auto n = y_.size();
    if (n == 0) throw Error(ErrorKind::TooSmall, "table needs at least one row");
    if (d_.size() != n || static_cast<std::size_t>(x_.rows()) != n) {
      throw Error(ErrorKind::LengthMismatch,
                  "y has " + std::to_string(n) + " rows, d " + std::to_string(d_.size()) +
                      ", x " + std::to_string(x_.rows()));
    }
    if (names_.empty()) {
      for (Eigen::Index k = 0; k < x_.cols(); ++k) names_.push_back("x" + std::to_string(k + 1));
    } else if (names_.size() != static_cast<std::size_t>(x_.cols())) {
      throw Error(ErrorKind::DimensionMismatch, "covariate names do not match column count");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (d_[i] != 0 && d_[i] != 1) {
        throw Error(ErrorKind::NonBinaryTreatment,
                    "row " + std::to_string(i) + " has treatment " + std::to_string(d_[i]));
      }
      if (!std::isfinite(y_[i])) {
        throw Error(ErrorKind::NonFiniteValue, "row " + std::to_string(i) + ", column y");
      }
      for (Eigen::Index k = 0; k < x_.cols(); ++k) {
        if (!std::isfinite(x_(static_cast<Eigen::Index>(i), k))) {
          throw Error(ErrorKind::NonFiniteValue,
                      "row " + std::to_string(i) + ", column " + names_[static_cast<std::size_t>(k)]);
        }
      }
      n_treated_ += static_cast<std::size_t>(d_[i]);
    }
  }

  std::size_t n() const noexcept { return y_.size(); }
  /// Number of covariate columns, excluding any intercept.
  std::size_t k() const noexcept { return static_cast<std::size_t>(x_.cols()); }
  std::size_t n_treated() const noexcept { return n_treated_; }
  std::size_t n_control() const noexcept { return n() - n_treated_; }
  bool has_intercept() const noexcept { return has_intercept_; }

  std::span<const double> y() const noexcept { return y_; }
  std::span<const int> d() const noexcept { return d_; }
  const Eigen::MatrixXd& x() const noexcept { return x_; }
  const std::vector<std::string>& covariate_names() const noexcept { return names_; }

  /// Covariates used for propensity fitting: x, plus a trailing column of
  /// ones when the table carries an intercept.
  Eigen::MatrixXd design() const {
    if (!has_intercept_) return x_;
    Eigen::MatrixXd out(x_.rows(), x_.cols() + 1);
    out.leftCols(x_.cols()) = x_;
    out.col(x_.cols()).setOnes();
    return out;
  }

  ObservationTable subset(std::span<const std::size_t> rows) const {
    std::vector<double> y;
    std::vector<int> d;
    Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), x_.cols());
    y.reserve(rows.size());
    d.reserve(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto i = rows[r];
      if (i >= n()) throw Error(ErrorKind::InvalidArgument, "row index out of range");
      y.push_back(y_[i]);
      d.push_back(d_[i]);
      x.row(static_cast<Eigen::Index>(r)) = x_.row(static_cast<Eigen::Index>(i));
    }
    return ObservationTable(std::move(y), std::move(d), std::move(x), has_intercept_, names_);
  }

 private:
  std::vector<double> y_;
  std::vector<int> d_;
  Eigen::MatrixXd x_;
  bool has_intercept_;
  std::vector<std::string> names_;
  std::size_t n_treated_ = 0;
};

/// Column names to read from a CSV file.
struct CsvSchema {
  std::string outcome;
  std::string treatment;
  std::vector<std::string> covariates;
  bool has_intercept = false;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cell.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cell.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::string(trim(cell)));
      cell.clear();
    } else {
      cell.push_back(c);
    }
  }
  cells.push_back(std::string(trim(cell)));
  return cells;
}

struct CsvFrame {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(ErrorKind::SchemaMismatch, "column \"" + name + "\" not found");
    return static_cast<std::size_t>(it - header.begin());
  }
};

inline CsvFrame read_csv_frame(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::FileNotFound, path.string());
  CsvFrame frame;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
      frame.header = split_csv_line(line);
      first = false;
      continue;
    }
    if (trim(line).empty()) continue;
    frame.rows.push_back(split_csv_line(line));
  }
  if (first) throw Error(ErrorKind::SchemaMismatch, "file has no header row");
  return frame;
}

inline double parse_cell(const CsvFrame& frame, std::size_t row, std::size_t col) {
  const auto& cells = frame.rows[row];
  const std::string where = "row " + std::to_string(row + 1) + ", column " + frame.header[col];
  if (col >= cells.size() || cells[col].empty()) {
    throw Error(ErrorKind::NonFiniteValue, "missing value at " + where);
  }
  std::string_view s = cells[col];
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw Error(ErrorKind::NonFiniteValue, "unparseable value \"" + cells[col] + "\" at " + where);
  }
  if (!std::isfinite(value)) throw Error(ErrorKind::NonFiniteValue, "non-finite value at " + where);
  return value;
}

}  // namespace detail

/// Reads an ObservationTable from a comma-separated file with a header row.
/// Any missing, unparseable or non-finite named cell fails the whole file.
inline ObservationTable ingest_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  if (schema.outcome.empty() || schema.treatment.empty() || schema.covariates.empty()) {
    throw Error(ErrorKind::SchemaMismatch,
                "schema needs an outcome, a treatment and at least one covariate column");
  }
  const auto frame = detail::read_csv_frame(path);
  const auto y_col = frame.column(schema.outcome);
  const auto d_col = frame.column(schema.treatment);
  std::vector<std::size_t> x_cols;
  for (const auto& name : schema.covariates) x_cols.push_back(frame.column(name));

  const auto n = frame.rows.size();
  if (n == 0) throw Error(ErrorKind::TooSmall, "file has no data rows");
  std::vector<double> y(n);
  std::vector<int> d(n);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(x_cols.size()));
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = detail::parse_cell(frame, i, y_col);
    const double di = detail::parse_cell(frame, i, d_col);
    if (di != 0.0 && di != 1.0) {
      throw Error(ErrorKind::NonBinaryTreatment, "row " + std::to_string(i + 1) + ", column " +
                                                     schema.treatment + " has value " +
                                                     frame.rows[i][d_col]);
    }
    d[i] = static_cast<int>(di);
    for (std::size_t k = 0; k < x_cols.size(); ++k) {
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) =
          detail::parse_cell(frame, i, x_cols[k]);
    }
  }
  return ObservationTable(std::move(y), std::move(d), std::move(x), schema.has_intercept,
                          schema.covariates);
}

/// Reads one numeric column (e.g. externally supplied propensity scores).
inline std::vector<double> read_csv_column(const std::filesystem::path& path, const std::string& name) {
  const auto frame = detail::read_csv_frame(path);
  const auto col = frame.column(name);
  std::vector<double> out(frame.rows.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::parse_cell(frame, i, col);
  return out;
}

/// Writes the table with columns y, d, then the covariates, at round-trip precision.
inline void write_csv(const ObservationTable& table, const std::filesystem::path& path,
                      const std::string& outcome = "y", const std::string& treatment = "d") {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::FileNotFound, "cannot write " + path.string());
  out << outcome << ',' << treatment;
  for (const auto& name : table.covariate_names()) out << ',' << name;
  out << '\n';
  char buf[32];
  const auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out << buf;
  };
  for (std::size_t i = 0; i < table.n(); ++i) {
    put(table.y()[i]);
    out << ',' << table.d()[i];
    for (std::size_t k = 0; k < table.k(); ++k) {
      out << ',';
      put(table.x()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)));
    }
    out << '\n';
  }
}

/// Two disjoint halves of a sample: the propensity model is fitted on
/// `fit_half` and the matching estimators are computed on `estimate_half`.
struct SplitSample {
  ObservationTable fit_half;
  ObservationTable estimate_half;
  std::vector<std::size_t> fit_indices;
  std::vector<std::size_t> estimate_indices;
  unsigned attempts = 1;
};

/// Random-permutation halving. The first floor(n/2) permuted rows form the
/// fit half. If a half misses a treatment group the permutation is redrawn
/// from a derived seed, up to 100 times.
inline SplitSample split_sample(const ObservationTable& table, std::uint64_t seed) {
  const auto n = table.n();
  if (n < 4) throw Error(ErrorKind::TooSmall, "sample splitting needs n >= 4, got " + std::to_string(n));
  const auto half = n / 2;
  const auto has_both = [&](std::span<const std::size_t> rows) {
    bool treated = false, control = false;
    for (auto i : rows) (table.d()[i] == 1 ? treated : control) = true;
    return treated && control;
  };
  std::vector<std::size_t> perm(n);
  for (unsigned attempt = 0; attempt <= 100; ++attempt) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(attempt == 0 ? seed : derive_seed(seed, attempt));
    for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    std::vector<std::size_t> fit(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(half));
    std::vector<std::size_t> est(perm.begin() + static_cast<std::ptrdiff_t>(half), perm.end());
    if (!has_both(fit) || !has_both(est)) continue;
    std::sort(fit.begin(), fit.end());
    std::sort(est.begin(), est.end());
    auto fit_table = table.subset(fit);
    auto est_table = table.subset(est);
    return SplitSample{std::move(fit_table), std::move(est_table), std::move(fit), std::move(est),
                       attempt + 1};
  }
  throw Error(ErrorKind::DegenerateSplit, "a half lacked a treatment group after 100 retries");
}

}  // namespace caliper
