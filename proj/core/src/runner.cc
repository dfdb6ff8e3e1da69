#include "fedvirt/runner.h"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

#include "fedvirt/container.h"
#include "fedvirt/errors.h"
#include "fedvirt/federation.h"

namespace fedvirt {
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string opt(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

std::string csv_header(std::int64_t clients) {
  std::string h = "round,stage";
  for (std::int64_t i = 0; i < clients; ++i) h += ",acc_client" + std::to_string(i);
  h += ",acc_avg,ce_mean,con_mean,dist_start,dist";
  for (std::int64_t a = 0; a < clients; ++a) {
    for (std::int64_t b = a + 1; b < clients; ++b) {
      const std::string pair = std::to_string(a) + "_" + std::to_string(b);
      h += ",mmd_real_" + pair + ",mmd_virtual_" + pair;
    }
  }
  return h;
}

std::string csv_row(const RoundMetrics& m) {
  std::string r = std::to_string(m.round) + "," + stage_name(m.stage);
  for (const auto& a : m.eval.accuracy) r += "," + opt(a);
  r += "," + format_double(m.eval.average);
  r += "," + opt(m.mean_ce) + "," + opt(m.mean_con) + "," + opt(m.dist_start) + "," + opt(m.dist);
  for (const PairMmd& p : m.mmd) r += "," + format_double(p.real) + "," + format_double(p.virt);
  return r;
}

void prepare_dir(const fs::path& dir) {
  fs::create_directories(dir);
  fs::remove(dir / "FAILED");
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

void write_snapshot(const fs::path& dir, const VirtualSnapshot& s) {
  fs::create_directories(dir / "virtual");
  const std::string t = "t" + std::to_string(s.round);
  if (s.global) write_container(dir / "virtual" / (t + "_global.fvc"), virtual_to_container(*s.global));
  for (std::size_t i = 0; i < s.local.size(); ++i) {
    write_container(dir / "virtual" / (t + "_client" + std::to_string(i) + ".fvc"),
                    virtual_to_container(s.local[i]));
  }
}

template <typename Fn>
auto guarded(const fs::path& dir, Fn&& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    std::ofstream(dir / "FAILED") << e.what() << "\n";
    throw;
  }
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

fs::path run_experiment(const Config& cfg, std::ostream& log) {
  validate_config(cfg);
  const fs::path dir = cfg.output_dir;
  return guarded(dir, [&] {
    const auto t0 = std::chrono::steady_clock::now();
    prepare_dir(dir);
    write_json(dir / "config.json", config_to_json(cfg));
    std::vector<ClientState> clients = build_clients(cfg);
    const auto n = static_cast<std::int64_t>(clients.size());

    std::ofstream csv(dir / "metrics.csv", std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + (dir / "metrics.csv").string());
    csv << "# fedvirt metrics schema " << kMetricsSchemaVersion << "\n" << csv_header(n) << "\n";

    RunObserver obs;
    obs.on_round = [&](const RoundMetrics& m) {
      csv << csv_row(m) << "\n";
      csv.flush();
      log << "round " << m.round << " [" << stage_name(m.stage) << "] avg acc "
          << format_double(m.eval.average);
      if (m.mean_con) log << " con " << format_double(*m.mean_con);
      if (m.dist) log << " dist " << format_double(*m.dist);
      log << std::endl;
    };
    obs.on_snapshot = [&](const VirtualSnapshot& s) { write_snapshot(dir, s); };
    if (cfg.save_reports) {
      fs::create_directories(dir / "reports");
      obs.on_reports = [&](std::int64_t round, std::span<const ClientReport> reports) {
        for (const ClientReport& r : reports) {
          write_container(dir / "reports" /
                              ("round" + std::to_string(round) + "_client" +
                               std::to_string(r.client_id) + ".fvc"),
                          report_to_container(r));
        }
      };
    }
    RunResult result = run_pipeline(cfg, std::move(clients), obs);
    csv.close();
    write_container(dir / "model_final.fvc", model_to_container(result.server.global_params));

    const RoundMetrics& last = result.rounds.back();
    json acc = json::array();
    for (const auto& a : last.eval.accuracy) acc.push_back(a ? json(*a) : json());
    json summary = {{"schema_version", kMetricsSchemaVersion},
                    {"method", rule_name(cfg.rule)},
                    {"seed", cfg.seed},
                    {"rounds", cfg.rounds},
                    {"tau", cfg.tau},
                    {"clients", n},
                    {"final_round", last.round},
                    {"final_accuracy", acc},
                    {"final_average", last.eval.average},
                    {"wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}};
    if (!result.note.empty()) summary["note"] = result.note;
    write_json(dir / "summary.json", summary);
    return dir;
  });
}

fs::path run_distill(const Config& cfg, std::ostream& log) {
  validate_config(cfg);
  const fs::path dir = cfg.output_dir;
  return guarded(dir, [&] {
    prepare_dir(dir);
    write_json(dir / "config.json", config_to_json(cfg));
    std::vector<ClientState> clients = build_clients(cfg);
    std::vector<DistillResult> warmup;
    ServerState server = initialize(cfg, clients, &warmup);
    VirtualSnapshot s;
    if (cfg.rule == Rule::kFedLgd) s.global = server.global_virtual;
    for (const ClientState& c : clients) s.local.push_back(c.virtual_data);
    write_snapshot(dir, s);
    json per = json::array();
    for (std::size_t i = 0; i < warmup.size(); ++i) {
      per.push_back({{"client", i},
                     {"mmd_before", warmup[i].initial_loss},
                     {"mmd_after", warmup[i].final_loss}});
      log << "client " << i << " feature MMD " << format_double(warmup[i].initial_loss) << " -> "
          << format_double(warmup[i].final_loss) << std::endl;
    }
    json pairs = json::array();
    for (const PairMmd& p : heterogeneity(server.global_params, clients)) {
      pairs.push_back({{"a", p.a}, {"b", p.b}, {"real", p.real}, {"virtual", p.virt}});
    }
    write_json(dir / "distill.json", {{"steps", cfg.local_distill_steps}, {"clients", per}, {"pairs", pairs}});
    return dir;
  });
}

std::vector<CompareRow> compare_runs(std::span<const fs::path> dirs) {
  std::vector<CompareRow> rows;
  for (const fs::path& d : dirs) {
    CompareRow r;
    r.dir = d.string();
    try {
      const json s = json::parse(read_file(d / "summary.json"));
      r.method = s.at("method").get<std::string>();
      r.seed = s.at("seed").get<std::uint64_t>();
      double sum = 0.0;
      std::int64_t present = 0;
      for (const json& a : s.at("final_accuracy")) {
        r.accuracy.push_back(a.is_null() ? std::nan("") : a.get<double>());
        if (!a.is_null()) {
          sum += a.get<double>();
          ++present;
        }
      }
      r.average = present ? sum / static_cast<double>(present) : 0.0;
      const double stored = s.at("final_average").get<double>();
      if (std::abs(stored - r.average) > 1e-12) {
        r.failed = true;
        r.error = "stored average " + format_double(stored) + " does not match the client columns";
      }
    } catch (const std::exception& e) {
      r.failed = true;
      r.error = fs::exists(d / "FAILED") ? "run failed" : std::string("no usable summary: ") + e.what();
      if (r.method.empty()) r.method = "?";
    }
    rows.push_back(std::move(r));
  }
  std::sort(rows.begin(), rows.end(), [](const CompareRow& a, const CompareRow& b) {
    return std::tie(a.method, a.seed, a.dir) < std::tie(b.method, b.seed, b.dir);
  });
  return rows;
}

std::string compare_table(std::span<const CompareRow> rows) {
  std::size_t clients = 0;
  for (const CompareRow& r : rows) clients = std::max(clients, r.accuracy.size());
  std::ostringstream out;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-10s %6s", "method", "seed");
  out << buf;
  for (std::size_t i = 0; i < clients; ++i) {
    std::snprintf(buf, sizeof buf, " %9s", ("client" + std::to_string(i)).c_str());
    out << buf;
  }
  out << "   Average  run\n";
  for (const CompareRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%-10s %6llu", r.method.c_str(), static_cast<unsigned long long>(r.seed));
    out << buf;
    if (r.failed) {
      out << "  FAILED: " << r.error << "  " << r.dir << "\n";
      continue;
    }
    for (std::size_t i = 0; i < clients; ++i) {
      if (i < r.accuracy.size() && !std::isnan(r.accuracy[i])) {
        std::snprintf(buf, sizeof buf, " %9.2f", 100.0 * r.accuracy[i]);
      } else {
        std::snprintf(buf, sizeof buf, " %9s", "-");
      }
      out << buf;
    }
    std::snprintf(buf, sizeof buf, " %9.2f", 100.0 * r.average);
    out << buf << "  " << r.dir << "\n";
  }
  return out.str();
}

std::string compare_csv(std::span<const CompareRow> rows) {
  std::size_t clients = 0;
  for (const CompareRow& r : rows) clients = std::max(clients, r.accuracy.size());
  std::string out = "method,seed";
  for (std::size_t i = 0; i < clients; ++i) out += ",client" + std::to_string(i);
  out += ",average,status,dir\n";
  for (const CompareRow& r : rows) {
    out += r.method + "," + std::to_string(r.seed);
    for (std::size_t i = 0; i < clients; ++i) {
      out += ",";
      if (!r.failed && i < r.accuracy.size() && !std::isnan(r.accuracy[i])) out += format_double(r.accuracy[i]);
    }
    out += "," + (r.failed ? std::string() : format_double(r.average));
    out += std::string(",") + (r.failed ? "failed" : "ok") + "," + r.dir + "\n";
  }
  return out;
}

}  // namespace fedvirt
