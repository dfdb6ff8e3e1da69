#include "fedvirt/config.h"

#include <fstream>
#include <set>

#include "fedvirt/container.h"
#include "fedvirt/errors.h"

namespace fedvirt {
namespace {

using json = nlohmann::json;

class Reader {
 public:
  Reader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }
  bool has(const std::string& k) {
    seen_.insert(k);
    return obj_.contains(k);
  }
  const json& at(const std::string& k) { return obj_.at(k); }

  void number(const std::string& k, double& out) {
    if (!has(k)) return;
    if (!at(k).is_number()) throw ConfigError(key(k), "expected a number");
    out = at(k).get<double>();
  }
  void integer(const std::string& k, std::int64_t& out) {
    if (!has(k)) return;
    const json& v = at(k);
    if (!v.is_number_integer()) throw ConfigError(key(k), "expected an integer");
    if (v.is_number_unsigned() && v.get<std::uint64_t>() > static_cast<std::uint64_t>(INT64_MAX)) {
      throw ConfigError(key(k), "integer out of range");
    }
    out = v.get<std::int64_t>();
  }
  void unsigned_integer(const std::string& k, std::uint64_t& out) {
    if (!has(k)) return;
    const json& v = at(k);
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(key(k), "expected a non-negative integer");
    }
    out = v.get<std::uint64_t>();
  }
  void boolean(const std::string& k, bool& out) {
    if (!has(k)) return;
    if (!at(k).is_boolean()) throw ConfigError(key(k), "expected true or false");
    out = at(k).get<bool>();
  }
  void string(const std::string& k, std::string& out) {
    if (!has(k)) return;
    if (!at(k).is_string()) throw ConfigError(key(k), "expected a string");
    out = at(k).get<std::string>();
  }
  void numbers(const std::string& k, std::vector<double>& out) {
    if (!has(k)) return;
    const json& v = at(k);
    if (!v.is_array()) throw ConfigError(key(k), "expected an array of numbers");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) throw ConfigError(key(k) + "[" + std::to_string(i) + "]", "expected a number");
      out.push_back(v[i].get<double>());
    }
  }

  void finish() const {
    for (const auto& [k, v] : obj_.items()) {
      if (!seen_.count(k)) throw ConfigError(key(k), "unknown key");
    }
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

ShiftSpec parse_shift(const json& j, const std::string& path) {
  Reader r(j, path);
  ShiftSpec s;
  r.numbers("tint_scale", s.tint_scale);
  r.numbers("tint_offset", s.tint_offset);
  r.number("contrast", s.contrast);
  r.boolean("invert", s.invert);
  r.number("rotate_degrees", s.rotate_degrees);
  r.number("noise_sigma", s.noise_sigma);
  r.finish();
  for (double v : s.tint_scale) {
    if (!(v >= 0.0 && v <= 2.0)) throw ConfigError(r.key("tint_scale"), "values must be in [0, 2]");
  }
  for (double v : s.tint_offset) {
    if (!(v >= -1.0 && v <= 1.0)) throw ConfigError(r.key("tint_offset"), "values must be in [-1, 1]");
  }
  if (!(s.contrast > 0.0 && s.contrast <= 4.0)) throw ConfigError(r.key("contrast"), "must be in (0, 4]");
  if (!(std::abs(s.rotate_degrees) <= 15.0)) throw ConfigError(r.key("rotate_degrees"), "must be in [-15, 15]");
  if (!(s.noise_sigma >= 0.0 && s.noise_sigma <= 0.5)) throw ConfigError(r.key("noise_sigma"), "must be in [0, 0.5]");
  return s;
}

ClientSpec parse_client(const json& j, const std::string& path) {
  Reader r(j, path);
  ClientSpec c;
  DatasetSource& s = c.source;
  r.string("source", s.kind);
  if (s.kind == "blob_digits") {
    r.integer("n_train", s.n_train);
    r.integer("n_test", s.n_test);
    r.integer("side", s.side);
    if (r.has("data_seed")) {
      s.has_data_seed = true;
      r.unsigned_integer("data_seed", s.data_seed);
    }
    if (s.n_train < 1) throw ConfigError(r.key("n_train"), "must be >= 1");
    if (s.n_test < 0) throw ConfigError(r.key("n_test"), "must be >= 0");
    if (s.side < 8 || s.side % 8 != 0) throw ConfigError(r.key("side"), "must be a positive multiple of 8");
  } else if (s.kind == "idx") {
    r.string("train_images", s.train_images);
    r.string("train_labels", s.train_labels);
    r.string("test_images", s.test_images);
    r.string("test_labels", s.test_labels);
    r.integer("classes", s.classes);
    r.boolean("rgb", s.rgb);
    if (s.train_images.empty()) throw ConfigError(r.key("train_images"), "required for idx sources");
    if (s.train_labels.empty()) throw ConfigError(r.key("train_labels"), "required for idx sources");
    if (s.test_images.empty() != s.test_labels.empty()) {
      throw ConfigError(r.key("test_images"), "test_images and test_labels go together");
    }
    if (s.classes < 1 || s.classes > 256) throw ConfigError(r.key("classes"), "must be in [1, 256]");
  } else {
    throw ConfigError(r.key("source"), "unknown source '" + s.kind + "' (blob_digits, idx)");
  }
  if (r.has("shift")) c.shift = parse_shift(r.at("shift"), r.key("shift"));
  r.finish();
  return c;
}

json shift_to_json(const ShiftSpec& s) {
  return {{"tint_scale", s.tint_scale},   {"tint_offset", s.tint_offset},
          {"contrast", s.contrast},       {"invert", s.invert},
          {"rotate_degrees", s.rotate_degrees}, {"noise_sigma", s.noise_sigma}};
}

json client_to_json(const ClientSpec& c) {
  const DatasetSource& s = c.source;
  json j = {{"source", s.kind}};
  if (s.kind == "blob_digits") {
    j["n_train"] = s.n_train;
    j["n_test"] = s.n_test;
    j["side"] = s.side;
    if (s.has_data_seed) j["data_seed"] = s.data_seed;
  } else {
    j["train_images"] = s.train_images;
    j["train_labels"] = s.train_labels;
    j["test_images"] = s.test_images;
    j["test_labels"] = s.test_labels;
    j["classes"] = s.classes;
    j["rgb"] = s.rgb;
  }
  j["shift"] = shift_to_json(c.shift);
  return j;
}

}  // namespace

std::string rule_name(Rule rule) {
  switch (rule) {
    case Rule::kFedAvg: return "fedavg";
    case Rule::kFedProx: return "fedprox";
    case Rule::kFedNova: return "fednova";
    case Rule::kScaffold: return "scaffold";
    case Rule::kFedLgd: return "fedlgd";
  }
  return "?";
}

Rule parse_rule(const std::string& name) {
  for (Rule r : {Rule::kFedAvg, Rule::kFedProx, Rule::kFedNova, Rule::kScaffold, Rule::kFedLgd}) {
    if (rule_name(r) == name) return r;
  }
  throw ConfigError("rule", "unknown rule '" + name + "' (fedavg, fedprox, fednova, scaffold, fedlgd)");
}

std::vector<ClientSpec> default_clients() {
  std::vector<ClientSpec> c(3);
  c[0].shift.tint_scale = {1.0, 0.5, 0.2};
  c[1].shift.noise_sigma = 0.2;
  c[2].shift.invert = true;
  return c;
}

Config default_config() {
  Config c;
  c.clients = default_clients();
  return c;
}

Config parse_config_json(const json& j) {
  Reader r(j, "");
  Config c = default_config();
  if (r.has("clients")) {
    const json& arr = r.at("clients");
    if (!arr.is_array() || arr.empty()) throw ConfigError("clients", "expected a nonempty array");
    c.clients.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      c.clients.push_back(parse_client(arr[i], "clients[" + std::to_string(i) + "]"));
    }
  }
  std::string arch = arch_name(c.arch);
  r.string("arch", arch);
  if (arch != "convnet" && arch != "mlp") throw ConfigError("arch", "unknown architecture '" + arch + "'");
  c.arch = parse_arch(arch);
  std::string rule = rule_name(c.rule);
  r.string("rule", rule);
  c.rule = parse_rule(rule);
  r.integer("width", c.width);
  r.integer("ipc", c.ipc);
  r.number("lambda", c.lambda);
  r.number("temperature", c.temperature);
  r.number("mu", c.mu);
  r.integer("local_epochs", c.local_epochs);
  r.integer("rounds", c.rounds);
  r.integer("tau", c.tau);
  r.integer("local_distill_steps", c.local_distill_steps);
  r.integer("global_distill_steps", c.global_distill_steps);
  r.integer("batch_size", c.batch_size);
  r.integer("dm_real_batch", c.dm_real_batch);
  r.number("lr_model", c.lr_model);
  r.number("lr_pixel_dm", c.lr_pixel_dm);
  r.number("lr_pixel_gm", c.lr_pixel_gm);
  r.number("participation", c.participation);
  r.boolean("ce_includes_global", c.ce_includes_global);
  r.boolean("augment", c.augment);
  r.boolean("save_reports", c.save_reports);
  r.unsigned_integer("seed", c.seed);
  r.string("output_dir", c.output_dir);
  r.finish();
  validate_config(c);
  return c;
}

void validate_config(const Config& c) {
  if (c.clients.empty()) throw ConfigError("clients", "at least one client is required");
  auto at_least = [](const char* key, std::int64_t v, std::int64_t lo) {
    if (v < lo) throw ConfigError(key, "must be >= " + std::to_string(lo) + ", got " + std::to_string(v));
  };
  at_least("width", c.width, 1);
  at_least("ipc", c.ipc, 1);
  at_least("local_epochs", c.local_epochs, 0);
  at_least("rounds", c.rounds, 0);
  at_least("tau", c.tau, 0);
  at_least("local_distill_steps", c.local_distill_steps, 0);
  at_least("global_distill_steps", c.global_distill_steps, 0);
  at_least("batch_size", c.batch_size, 2);
  at_least("dm_real_batch", c.dm_real_batch, 1);
  if (c.tau > c.rounds) {
    throw ConfigError("tau", "distillation rounds " + std::to_string(c.tau) +
                                 " exceed total rounds " + std::to_string(c.rounds));
  }
  if (!(c.lambda >= 0.0)) throw ConfigError("lambda", "must be >= 0");
  if (!(c.mu >= 0.0)) throw ConfigError("mu", "must be >= 0");
  if (!(c.temperature > 0.0)) throw ConfigError("temperature", "must be > 0");
  if (!(c.lr_model > 0.0)) throw ConfigError("lr_model", "must be > 0");
  if (!(c.lr_pixel_dm > 0.0)) throw ConfigError("lr_pixel_dm", "must be > 0");
  if (!(c.lr_pixel_gm > 0.0)) throw ConfigError("lr_pixel_gm", "must be > 0");
  if (!(c.participation > 0.0 && c.participation <= 1.0)) {
    throw ConfigError("participation", "must be in (0, 1]");
  }
  if (c.output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
}

Config parse_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError("<file>", e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
  }
  return parse_config_json(j);
}

json config_to_json(const Config& c) {
  json clients = json::array();
  for (const ClientSpec& s : c.clients) clients.push_back(client_to_json(s));
  return {{"clients", clients},
          {"arch", arch_name(c.arch)},
          {"width", c.width},
          {"ipc", c.ipc},
          {"lambda", c.lambda},
          {"temperature", c.temperature},
          {"mu", c.mu},
          {"rule", rule_name(c.rule)},
          {"local_epochs", c.local_epochs},
          {"rounds", c.rounds},
          {"tau", c.tau},
          {"local_distill_steps", c.local_distill_steps},
          {"global_distill_steps", c.global_distill_steps},
          {"batch_size", c.batch_size},
          {"dm_real_batch", c.dm_real_batch},
          {"lr_model", c.lr_model},
          {"lr_pixel_dm", c.lr_pixel_dm},
          {"lr_pixel_gm", c.lr_pixel_gm},
          {"participation", c.participation},
          {"ce_includes_global", c.ce_includes_global},
          {"augment", c.augment},
          {"save_reports", c.save_reports},
          {"seed", c.seed},
          {"output_dir", c.output_dir}};
}

}  // namespace fedvirt
