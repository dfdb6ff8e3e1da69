#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fedvirt/config.h"
#include "fedvirt/errors.h"

namespace fedvirt {
namespace {

std::string key_of(const nlohmann::json& j) {
  try {
    validate_config(parse_config_json(j));
  } catch (const ConfigError& e) {
    return e.key_path();
  }
  return "<none>";
}

TEST(Config, Defaults) {
  Config c = default_config();
  EXPECT_EQ(c.lr_model, 1e-2);
  EXPECT_EQ(c.batch_size, 32);
  EXPECT_EQ(c.local_epochs, 1);
  EXPECT_EQ(c.rounds, 100);
  EXPECT_EQ(c.tau, 10);
  EXPECT_EQ(c.ipc, 10);
  EXPECT_EQ(c.lambda, 10.0);
  EXPECT_EQ(c.temperature, 0.07);
  EXPECT_EQ(c.local_distill_steps, 200);
  EXPECT_EQ(c.global_distill_steps, 2000);
  EXPECT_EQ(c.clients.size(), 3u);
  EXPECT_EQ(parse_config_json(nlohmann::json::object()), c);
}

TEST(Config, JsonRoundTrip) {
  Config c = default_config();
  c.rule = Rule::kScaffold;
  c.clients[1].shift.rotate_degrees = 5;
  c.clients[0].source.has_data_seed = true;
  c.clients[0].source.data_seed = 99;
  c.seed = 1234567890123ull;
  c.lr_model = 0.1 + 0.2;
  EXPECT_EQ(parse_config_json(config_to_json(c)), c);
  EXPECT_EQ(parse_config_json(nlohmann::json::parse(config_to_json(c).dump())), c);
}

TEST(Config, ErrorsCarryKeyPath) {
  EXPECT_EQ(key_of({{"bogus", 1}}), "bogus");
  EXPECT_EQ(key_of({{"rounds", "ten"}}), "rounds");
  EXPECT_EQ(key_of({{"rounds", 5}, {"tau", 6}}), "tau");
  EXPECT_EQ(key_of({{"rule", "fedsgd"}}), "rule");
  EXPECT_EQ(key_of({{"arch", "resnet"}}), "arch");
  EXPECT_EQ(key_of({{"temperature", 0}}), "temperature");
  EXPECT_EQ(key_of({{"clients", nlohmann::json::array()}}), "clients");
  nlohmann::json j = config_to_json(default_config());
  j["clients"][1]["shift"]["x"] = 1;
  EXPECT_EQ(key_of(j), "clients[1].shift.x");
  j = config_to_json(default_config());
  j["clients"][2]["shift"]["rotate_degrees"] = 40;
  EXPECT_EQ(key_of(j), "clients[2].shift.rotate_degrees");
}

TEST(Config, FileErrors) {
  const auto path = std::filesystem::temp_directory_path() / "fedvirt_config_test.json";
  {
    std::ofstream(path) << "{ not json";
  }
  EXPECT_THROW(parse_config(path), ConfigError);
  EXPECT_THROW(parse_config(path.string() + ".missing"), ConfigError);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace fedvirt
