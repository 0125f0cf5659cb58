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
#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "caliper/dgp.hpp"
#include "json.hpp"

using namespace caliper;
namespace fs = std::filesystem;

namespace {

fs::path work_dir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("caliper_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = std::string(CALIPER_MATCH_BIN) + " " + args + " > " + (work_dir() / "stdout.txt").string() +
                          " 2> " + (work_dir() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path sample_csv() {
  const auto path = work_dir() / "sample.csv";
  if (fs::exists(path)) return path;
  const auto s = draw_sample(AdmissibleDgp::homogeneous(), 400, 17);
  std::ofstream out(path);
  out.precision(17);
  out << "y,d,x1,x2,ps\n";
  for (std::size_t i = 0; i < 400; ++i) {
    out << s.table.y()[i] << ',' << s.table.d()[i] << ',' << s.table.x()(static_cast<Eigen::Index>(i), 0) << ','
        << s.table.x()(static_cast<Eigen::Index>(i), 1) << ',' << s.scores[i] << '\n';
  }
  return path;
}

}  // namespace

TEST(Cli, EstimateWritesReport) {
  const auto out = work_dir() / "report.json";
  ASSERT_EQ(run("estimate --csv " + sample_csv().string() + " --y y --d d --x x1,x2 --link logit --alpha 0.05 --seed 7 --out " +
                out.string()),
            0)
      << slurp(work_dir() / "stderr.txt");
  const auto j = nlohmann::json::parse(slurp(out));
  EXPECT_EQ(j.at("schema"), "caliper-match/1");
  EXPECT_EQ(j.at("config").at("seed"), 7);
  EXPECT_EQ(j.at("mode"), "estimated");
  EXPECT_GE(j.at("variance").at("theta_term").get<double>(), 0.0);
  EXPECT_NE(slurp(work_dir() / "stdout.txt").find("ATE"), std::string::npos);
  const auto out2 = work_dir() / "report2.json";
  ASSERT_EQ(run("estimate --csv " + sample_csv().string() + " --y y --d d --x x1,x2 --seed 7 --threads 3 --out " +
                out2.string()),
            0);
  EXPECT_EQ(slurp(out), slurp(out2));
}

TEST(Cli, EstimateKnownScores) {
  const auto out = work_dir() / "known.json";
  ASSERT_EQ(run("estimate --csv " + sample_csv().string() + " --y y --d d --known-scores ps --out " + out.string()), 0)
      << slurp(work_dir() / "stderr.txt");
  const auto j = nlohmann::json::parse(slurp(out));
  EXPECT_EQ(j.at("mode"), "known");
  EXPECT_EQ(j.at("variance").at("theta_term").get<double>(), 0.0);
  EXPECT_EQ(j.at("n_estimation"), 400);
}

TEST(Cli, SeedIsRecordedWhenOmitted) {
  const auto out = work_dir() / "entropy.json";
  ASSERT_EQ(run("estimate --csv " + sample_csv().string() + " --y y --d d --x x1,x2 --out " + out.string()), 0);
  const auto j = nlohmann::json::parse(slurp(out));
  EXPECT_TRUE(j.at("config").at("seed").is_number_unsigned());
}

TEST(Cli, UsageErrorsExitOne) {
  const auto csv = sample_csv().string();
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("estimate --csv " + csv + " --y y --x x1,x2"), 1);
  EXPECT_NE(slurp(work_dir() / "stderr.txt").find("--d"), std::string::npos);
  EXPECT_EQ(run("estimate --csv " + csv + " --y y --d d --x x1,x2 --alpha 1.5"), 1);
  EXPECT_EQ(run("estimate --csv " + csv + " --y y --d d --x x1,x2 --link cauchit"), 1);
  EXPECT_EQ(run("estimate --csv " + csv + " --y y --d d --x x1,x2 --s -1"), 1);
  EXPECT_EQ(run("estimate --csv " + csv + " --y y --d d --x x1,x2 --bw-alpha 0.3"), 1);
  EXPECT_EQ(run("estimate --csv " + csv + " --y y --d d"), 1);
  EXPECT_EQ(run("simulate"), 1);
  EXPECT_EQ(run("simulate coverage --reps 0"), 1);
  EXPECT_EQ(run("simulate matches --levels 400,100"), 1);
  EXPECT_EQ(run("estimate --csv"), 1);
  EXPECT_EQ(run("--threads 2"), 1);
}

TEST(Cli, DataErrorsExitTwo) {
  EXPECT_EQ(run("estimate --csv /nonexistent/file.csv --y y --d d --x x1"), 2);
  EXPECT_NE(slurp(work_dir() / "stderr.txt").find("FileNotFound"), std::string::npos);
  EXPECT_EQ(run("estimate --csv " + sample_csv().string() + " --y y --d d --x nope"), 2);
  const auto bad = work_dir() / "bad.csv";
  {
    std::ofstream out(bad);
    out << "y,d,x1\n1,2,0.5\n2,0,0.1\n";
  }
  EXPECT_EQ(run("estimate --csv " + bad.string() + " --y y --d d --x x1"), 2);
  const auto tiny = work_dir() / "tiny.csv";
  {
    std::ofstream out(tiny);
    out << "y,d,x1,x2\n1,1,0.5,0.1\n2,0,0.1,0.3\n3,1,0.7,0.2\n";
  }
  EXPECT_EQ(run("estimate --csv " + tiny.string() + " --y y --d d --x x1,x2"), 2);
  EXPECT_NE(slurp(work_dir() / "stderr.txt").find("input"), std::string::npos);
}

TEST(Cli, SimulateWritesSummaries) {
  const auto json = work_dir() / "cov.json";
  const auto csv = work_dir() / "cov.csv";
  ASSERT_EQ(run("simulate coverage --n 500 --reps 4 --seed 1 --json " + json.string() + " --csv " + csv.string()), 0)
      << slurp(work_dir() / "stderr.txt");
  const auto j = nlohmann::json::parse(slurp(json));
  EXPECT_EQ(j.at("reps"), 4);
  EXPECT_EQ(j.at("rows").size(), 4u);
  const auto csv_text = slurp(csv);
  EXPECT_EQ(std::count(csv_text.begin(), csv_text.end(), '\n'), 5);

  const auto mj = work_dir() / "mat.json";
  ASSERT_EQ(run("simulate matches --levels 200,400 --reps 3 --caliper data-dependent --seed 2 --acceptance --json " +
                mj.string()),
            0)
      << slurp(work_dir() / "stdout.txt");
  EXPECT_EQ(nlohmann::json::parse(slurp(mj)).at("rows").size(), 2u);
  EXPECT_NE(slurp(work_dir() / "stdout.txt").find("PASS"), std::string::npos);
}
