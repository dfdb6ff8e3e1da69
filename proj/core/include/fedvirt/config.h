#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedvirt/data.h"
#include "fedvirt/models.h"

namespace fedvirt {

enum class Rule { kFedAvg, kFedProx, kFedNova, kScaffold, kFedLgd };

std::string rule_name(Rule rule);
Rule parse_rule(const std::string& name);

// Where a client's data comes from. "blob_digits" generates train and test
// sets; "idx" reads MNIST-style files.
struct DatasetSource {
  std::string kind = "blob_digits";
  // blob_digits
  std::int64_t n_train = 400;
  std::int64_t n_test = 200;
  std::int64_t side = 16;
  bool has_data_seed = false;  // otherwise derived from the run seed
  std::uint64_t data_seed = 0;
  // idx
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
  std::int64_t classes = 10;
  bool rgb = false;

  bool operator==(const DatasetSource&) const = default;
};

struct ClientSpec {
  DatasetSource source;
  ShiftSpec shift;

  bool operator==(const ClientSpec&) const = default;
};

struct Config {
  std::vector<ClientSpec> clients;
  Arch arch = Arch::kConvNet;
  std::int64_t width = 128;
  std::int64_t ipc = 10;
  double lambda = 10.0;
  double temperature = 0.07;
  double mu = 0.01;
  Rule rule = Rule::kFedLgd;
  std::int64_t local_epochs = 1;
  std::int64_t rounds = 100;
  std::int64_t tau = 10;
  std::int64_t local_distill_steps = 200;
  std::int64_t global_distill_steps = 2000;
  std::int64_t batch_size = 32;
  std::int64_t dm_real_batch = 32;
  double lr_model = 1e-2;
  double lr_pixel_dm = 1.0;
  double lr_pixel_gm = 0.1;
  double participation = 1.0;
  bool ce_includes_global = true;
  bool augment = false;
  bool save_reports = false;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/run";

  bool operator==(const Config&) const = default;
};

// Three blob-digits clients: a color tint, heavy noise, inverted intensities.
std::vector<ClientSpec> default_clients();
Config default_config();

// Flat JSON object; see docs/config.md. Unknown keys, wrong types and broken
// invariants throw ConfigError carrying the key path.
Config parse_config_json(const nlohmann::json& j);
Config parse_config(const std::filesystem::path& path);
nlohmann::json config_to_json(const Config& cfg);
void validate_config(const Config& cfg);

}  // namespace fedvirt
