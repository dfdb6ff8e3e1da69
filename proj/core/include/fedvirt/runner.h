#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "fedvirt/config.h"

namespace fedvirt {

inline constexpr int kMetricsSchemaVersion = 1;

// Runs the configured experiment into cfg.output_dir:
//   config.json       effective configuration (re-parses to the same Config)
//   metrics.csv       schema line, header, one row per round (0 = after init)
//   summary.json      final accuracies, seed, wall time
//   model_final.fvc   final global model
//   virtual/          virtual datasets after rounds 0, tau and T
//   reports/          client reports per round, when save_reports is set
// On failure a FAILED file holding the error is left next to partial output
// and the exception is rethrown.
std::filesystem::path run_experiment(const Config& cfg, std::ostream& log);

// Stage 1 only: writes config.json, the warmed-up virtual datasets and
// distill.json (per-client feature MMD before and after) to cfg.output_dir.
std::filesystem::path run_distill(const Config& cfg, std::ostream& log);

struct CompareRow {
  std::string dir;
  std::string method;
  std::uint64_t seed = 0;
  std::vector<double> accuracy;
  double average = 0.0;
  bool failed = false;
  std::string error;
};

// One row per run directory, sorted by method, then seed, then directory.
// The average is recomputed from the client columns and checked against the
// stored one.
std::vector<CompareRow> compare_runs(std::span<const std::filesystem::path> dirs);
std::string compare_table(std::span<const CompareRow> rows);
std::string compare_csv(std::span<const CompareRow> rows);

// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

}  // namespace fedvirt
