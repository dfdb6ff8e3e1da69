#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedvirt/config.h"
#include "fedvirt/errors.h"
#include "fedvirt/gradcheck_suite.h"
#include "fedvirt/parallel.h"
#include "fedvirt/runner.h"

namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitContract = 3;

fedvirt::Config load(const std::string& path, std::optional<std::uint64_t> seed, const std::string& out) {
  fedvirt::Config cfg = fedvirt::parse_config(path);
  if (seed) cfg.seed = *seed;
  if (!out.empty()) cfg.output_dir = out;
  fedvirt::validate_config(cfg);
  return cfg;
}

int cmd_gradcheck() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto entries = fedvirt::run_gradcheck_suite(0, &std::cout);
  int failed = 0;
  for (const auto& e : entries) failed += e.passed ? 0 : 1;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%zu checks, %d failed, %.1f s\n", entries.size(), failed, secs);
  return failed == 0 ? 0 : 1;
}

int cmd_compare(const std::vector<std::string>& dirs, bool csv) {
  std::vector<fs::path> paths(dirs.begin(), dirs.end());
  const auto rows = fedvirt::compare_runs(paths);
  std::cout << (csv ? fedvirt::compare_csv(rows) : fedvirt::compare_table(rows));
  for (const auto& r : rows) {
    if (r.failed) return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning on distilled virtual data"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  auto* run = app.add_subcommand("run", "Run a full experiment");
  run->add_option("--config", config_path, "JSON config")->required();
  run->add_option("--seed", seed, "Override the config seed");
  run->add_option("--out", out_dir, "Override the output directory");

  std::string distill_config;
  std::string distill_out;
  auto* distill = app.add_subcommand("distill", "Initialization and local distillation only");
  distill->add_option("--config", distill_config, "JSON config")->required();
  distill->add_option("--out", distill_out, "Override the output directory");

  std::vector<std::string> dirs;
  bool csv = false;
  auto* compare = app.add_subcommand("compare", "Tabulate finished runs");
  compare->add_option("dirs", dirs, "Run directories")->required();
  compare->add_flag("--csv", csv, "Emit CSV instead of a table");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of all gradients");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  fedvirt::ThreadLimit limit(fedvirt::threads_from_env());
  try {
    if (*run) {
      const auto dir = fedvirt::run_experiment(load(config_path, seed, out_dir), std::cerr);
      std::cout << dir.string() << "\n";
      return 0;
    }
    if (*distill) {
      const auto dir = fedvirt::run_distill(load(distill_config, std::nullopt, distill_out), std::cerr);
      std::cout << dir.string() << "\n";
      return 0;
    }
    if (*compare) return cmd_compare(dirs, csv);
    if (*gradcheck) return cmd_gradcheck();
  } catch (const fedvirt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fedvirt::ContractError& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return kExitContract;
  } catch (const fedvirt::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitContract;
  } catch (const fedvirt::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
