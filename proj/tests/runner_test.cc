#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedvirt/config.h"
#include "fedvirt/container.h"
#include "fedvirt/runner.h"
#include "test_fixtures.h"

namespace fedvirt {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("fedvirt_runner_test_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  if (!s.empty() && s.back() == ',') out.emplace_back();
  return out;
}

Config smoke(Rule rule, const fs::path& dir) {
  Config c = testing::small_config(rule);
  c.output_dir = dir.string();
  c.save_reports = true;
  return c;
}

TEST(Runner, WritesTheRunDirectory) {
  const fs::path dir = scratch("layout");
  std::ostringstream log;
  run_experiment(smoke(Rule::kFedLgd, dir), log);
  for (const char* f : {"config.json", "metrics.csv", "summary.json", "model_final.fvc",
                        "virtual/t0_global.fvc", "virtual/t1_client0.fvc", "virtual/t3_client1.fvc",
                        "reports/round1_client0.fvc", "reports/round3_client1.fvc"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_FALSE(fs::exists(dir / "FAILED"));
  EXPECT_NE(log.str().find("round 3"), std::string::npos);
}

TEST(Runner, ConfigSnapshotReparsesIdentically) {
  const fs::path dir = scratch("config");
  std::ostringstream log;
  Config c = smoke(Rule::kFedAvg, dir);
  run_experiment(c, log);
  EXPECT_EQ(parse_config(dir / "config.json"), c);
}

TEST(Runner, SummaryIsRecomputableFromMetrics) {
  const fs::path dir = scratch("summary");
  std::ostringstream log;
  run_experiment(smoke(Rule::kFedProx, dir), log);
  const auto lines = lines_of(dir / "metrics.csv");
  ASSERT_EQ(lines.size(), 2u + 4u);
  EXPECT_EQ(lines[0], "# fedvirt metrics schema " + std::to_string(kMetricsSchemaVersion));
  const auto header = split(lines[1]);
  const auto last = split(lines.back());
  ASSERT_EQ(header.size(), last.size());
  auto col = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return last[i];
    ADD_FAILURE() << "no column " << name;
    return std::string();
  };
  const auto s = nlohmann::json::parse(read_file(dir / "summary.json"));
  EXPECT_EQ(s["final_round"].get<int>(), std::stoi(col("round")));
  EXPECT_EQ(s["final_accuracy"][0].get<double>(), std::stod(col("acc_client0")));
  EXPECT_EQ(s["final_accuracy"][1].get<double>(), std::stod(col("acc_client1")));
  EXPECT_EQ(s["final_average"].get<double>(), std::stod(col("acc_avg")));
  EXPECT_EQ(s["method"], "fedprox");
  EXPECT_FALSE(col("mmd_real_0_1").empty());
  EXPECT_FALSE(col("mmd_virtual_0_1").empty());
}

TEST(Runner, SameSeedSameMetrics) {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  std::ostringstream log;
  run_experiment(smoke(Rule::kFedLgd, a), log);
  run_experiment(smoke(Rule::kFedLgd, b), log);
  EXPECT_EQ(read_file(a / "metrics.csv"), read_file(b / "metrics.csv"));
}

TEST(Runner, FailureLeavesMarker) {
  const fs::path dir = scratch("fail");
  Config c = smoke(Rule::kFedAvg, dir);
  c.clients[0].source.kind = "idx";
  c.clients[0].source.train_images = (dir / "missing-images").string();
  c.clients[0].source.train_labels = (dir / "missing-labels").string();
  c.clients[0].source.test_images = (dir / "missing-images").string();
  c.clients[0].source.test_labels = (dir / "missing-labels").string();
  std::ostringstream log;
  EXPECT_ANY_THROW(run_experiment(c, log));
  EXPECT_TRUE(fs::exists(dir / "FAILED"));
}

TEST(Compare, TableSortedWithRecomputedAverage) {
  const fs::path a = scratch("cmp_a"), b = scratch("cmp_b"), missing = scratch("cmp_missing");
  std::ostringstream log;
  run_experiment(smoke(Rule::kFedProx, a), log);
  run_experiment(smoke(Rule::kFedAvg, b), log);
  const fs::path dirs[] = {a, missing, b};
  const auto rows = compare_runs(dirs);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].method, "?");
  EXPECT_TRUE(rows[0].failed);
  EXPECT_EQ(rows[1].method, "fedavg");
  EXPECT_EQ(rows[2].method, "fedprox");
  EXPECT_NEAR(rows[1].average, (rows[1].accuracy[0] + rows[1].accuracy[1]) / 2, 1e-15);
  const std::string csv = compare_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "method,seed,client0,client1,average,status,dir");
  EXPECT_NE(compare_table(rows).find("FAILED"), std::string::npos);
  const fs::path one[] = {b};
  EXPECT_EQ(compare_runs(one).size(), 1u);
}

TEST(Compare, TamperedAverageIsFlagged) {
  const fs::path dir = scratch("tamper");
  std::ostringstream log;
  run_experiment(smoke(Rule::kFedAvg, dir), log);
  auto s = nlohmann::json::parse(read_file(dir / "summary.json"));
  s["final_average"] = s["final_average"].get<double>() + 0.01;
  write_file_atomic(dir / "summary.json", s.dump());
  const fs::path dirs[] = {dir};
  EXPECT_TRUE(compare_runs(dirs)[0].failed);
}

TEST(FormatDouble, RoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456789.0, -0.0}) EXPECT_EQ(std::stod(format_double(v)), v);
  EXPECT_EQ(format_double(0.5), "0.5");
}

#ifdef FEDVIRT_CLI
int cli(const std::string& args) {
  const int rc = std::system((std::string(FEDVIRT_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WEXITSTATUS(rc);
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("cli");
  fs::create_directories(dir);
  std::ofstream(dir / "bad.json") << R"({"rounds": 2, "tau": 5})";
  EXPECT_EQ(cli("run --config " + (dir / "bad.json").string()), 2);
  std::ofstream(dir / "unknown.json") << R"({"lamda": 1})";
  EXPECT_EQ(cli("run --config " + (dir / "unknown.json").string()), 2);

  // Valid JSON that breaks a runtime contract: batch too small for 4 classes.
  nlohmann::json j = config_to_json(smoke(Rule::kFedAvg, dir / "run"));
  j["batch_size"] = 4;
  std::ofstream(dir / "contract.json") << j.dump();
  EXPECT_EQ(cli("run --config " + (dir / "contract.json").string()), 3);

  j["batch_size"] = 8;
  std::ofstream(dir / "good.json") << j.dump();
  EXPECT_EQ(cli("run --config " + (dir / "good.json").string() + " --seed 3 --out " + (dir / "out").string()), 0);
  EXPECT_EQ(nlohmann::json::parse(read_file(dir / "out" / "summary.json"))["seed"], 3);
  EXPECT_EQ(cli("compare " + (dir / "out").string()), 0);
  EXPECT_EQ(cli("compare --csv " + (dir / "out").string()), 0);
  EXPECT_EQ(cli("distill --config " + (dir / "good.json").string() + " --out " + (dir / "d").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "d" / "distill.json"));
  EXPECT_NE(cli("frobnicate"), 0);
}
#endif

}  // namespace
}  // namespace fedvirt
