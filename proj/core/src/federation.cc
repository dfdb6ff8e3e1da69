#include "fedvirt/federation.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "fedvirt/container.h"
#include "fedvirt/errors.h"
#include "fedvirt/parallel.h"
#include "fedvirt/rng.h"

namespace fedvirt {
namespace {

// Stream identifiers for derive_seed.
enum Tag : std::uint64_t {
  kModelTag = 1,
  kTrainDataTag,
  kTestDataTag,
  kShiftTag,
  kVirtualInitTag,
  kDistillTag,
  kServerInitTag,
  kBatchTag,
  kGlobalBatchTag,
  kParticipationTag,
};

std::uint64_t u(std::int64_t v) { return static_cast<std::uint64_t>(v); }

NamedTensors zeros_like(const NamedTensors& set) {
  NamedTensors out = set;
  for (NamedTensor& t : out) t.value = Tensor::zeros(t.value.shape());
  return out;
}

void check_same_layout(const NamedTensors& a, const NamedTensors& b, const char* what) {
  if (a.size() != b.size()) throw ContractError(std::string(what) + ": tensor counts differ");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].value.shape() != b[i].value.shape()) {
      throw ContractError(std::string(what) + ": '" + a[i].name + "' " +
                          shape_string(a[i].value.shape()) + " does not match '" + b[i].name +
                          "' " + shape_string(b[i].value.shape()));
    }
  }
}

// Sets of per-class mean feature rows, absent classes empty.
std::vector<std::vector<double>> class_means(const ModelParams& model, const Tensor& images,
                                             const Labels& labels, std::int64_t class_count) {
  const Tensor f = features_no_grad(model, images);
  const std::int64_t d = f.dim(1);
  auto fd = f.data();
  std::vector<std::vector<double>> out(static_cast<std::size_t>(class_count));
  const auto idx = class_indices(labels, class_count);
  for (std::int64_t k = 0; k < class_count; ++k) {
    if (idx[k].empty()) continue;
    std::vector<double> m(static_cast<std::size_t>(d), 0.0);
    for (std::int64_t i : idx[k]) {
      for (std::int64_t j = 0; j < d; ++j) m[j] += fd[i * d + j];
    }
    for (double& v : m) v /= static_cast<double>(idx[k].size());
    out[k] = std::move(m);
  }
  return out;
}

double mean_distance(const std::vector<std::vector<double>>& a,
                     const std::vector<std::vector<double>>& b) {
  double total = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (a[k].empty() || b[k].empty()) continue;
    double s = 0.0;
    for (std::size_t j = 0; j < a[k].size(); ++j) {
      const double e = a[k][j] - b[k][j];
      s += e * e;
    }
    total += s;
  }
  return total;
}

std::vector<std::int64_t> participants(const Config& cfg, std::int64_t n, std::int64_t round) {
  std::vector<std::int64_t> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  if (cfg.participation >= 1.0) return all;
  const auto m = std::max<std::int64_t>(1, std::llround(cfg.participation * static_cast<double>(n)));
  Rng rng(derive_seed(cfg.seed, {kParticipationTag, u(round)}));
  std::vector<std::int64_t> pick = rng.sample_without_replacement(n, m);
  std::sort(pick.begin(), pick.end());
  return pick;
}

std::optional<double> mean_metric(std::span<const ClientReport> reports, const std::string& key) {
  double s = 0.0;
  std::int64_t n = 0;
  for (const ClientReport& r : reports) {
    auto it = r.metrics.find(key);
    if (it == r.metrics.end()) continue;
    s += it->second;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

}  // namespace

std::string stage_name(Stage stage) {
  switch (stage) {
    case Stage::kInit: return "init";
    case Stage::kDistill: return "distill";
    case Stage::kVirtualTrain: return "virtual_train";
  }
  return "?";
}

void ServerState::advance(Stage next) {
  if (static_cast<int>(next) < static_cast<int>(stage)) {
    throw ContractError("server: stage cannot go from " + stage_name(stage) + " back to " +
                        stage_name(next));
  }
  stage = next;
}

ClientReport client_update(ClientState& client, const ModelParams& global,
                           const VirtualDataset* global_virtual, const NamedTensors& server_control,
                           const Config& cfg, std::int64_t round) {
  const bool lgd = cfg.rule == Rule::kFedLgd;
  const bool scaffold = cfg.rule == Rule::kScaffold;
  if (lgd && (global_virtual == nullptr || global_virtual->size() == 0)) {
    throw ContractError("client_update: fedlgd needs global virtual data");
  }
  const VirtualDataset& v = client.virtual_data;
  check_virtual(v);
  const ModelParams received = detached(global);
  const NamedTensors names = received.all();
  if (scaffold) {
    if (client.scaffold_control.empty()) client.scaffold_control = zeros_like(names);
    check_same_layout(names, server_control, "scaffold control");
    check_same_layout(names, client.scaffold_control, "client control");
  }

  ClientReport report;
  report.client_id = client.client_id;
  report.n_virtual = v.size();
  report.ce_grad = ce_gradient(received, v.images, v.labels);

  std::vector<Tensor> w = values_of(names);
  std::map<std::string, double> sums;
  std::int64_t steps = 0;
  for (std::int64_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    const Batches batches = balanced_batches(
        v.labels, cfg.batch_size,
        derive_seed(cfg.seed, {kBatchTag, u(client.client_id), u(round), u(epoch)}));
    Batches global_batches;
    if (lgd) {
      global_batches = balanced_batches(
          global_virtual->labels, cfg.batch_size,
          derive_seed(cfg.seed, {kGlobalBatchTag, u(client.client_id), u(round), u(epoch)}));
    }
    for (std::size_t b = 0; b < batches.size(); ++b) {
      Record rec;
      RecordScope scope(rec);
      ModelParams p = attach(with_values(received, w), rec);
      const auto& idx = batches[b];
      Tensor xb = take_rows(v.images.detach(), idx);
      Labels yb;
      for (std::int64_t i : idx) yb.push_back(v.labels[i]);
      LossValue loss;
      if (lgd) {
        const auto& gidx = global_batches[b % global_batches.size()];
        Tensor gx = take_rows(global_virtual->images.detach(), gidx);
        Labels gy;
        for (std::int64_t i : gidx) gy.push_back(global_virtual->labels[i]);
        loss = total_loss(p, xb, yb, gx, gy,
                          {.lambda = cfg.lambda,
                           .temperature = cfg.temperature,
                           .ce_includes_global = cfg.ce_includes_global});
      } else {
        loss = cross_entropy(predict_logits(p, xb), yb);
        if (cfg.rule == Rule::kFedProx) {
          LossValue prox = prox_term(p, received, cfg.mu);
          loss.value = add(loss.value, prox.value);
          loss.breakdown["prox"] = prox.breakdown["prox"];
        }
      }
      const std::vector<Tensor> leaves = values_of(p.all());
      const std::vector<Tensor> g = backward(loss.value, leaves);
      for (std::size_t t = 0; t < w.size(); ++t) {
        std::vector<double> next(w[t].data().begin(), w[t].data().end());
        auto gd = g[t].data();
        if (scaffold) {
          auto c = server_control[t].value.data();
          auto ci = client.scaffold_control[t].value.data();
          for (std::size_t j = 0; j < next.size(); ++j) next[j] -= cfg.lr_model * (gd[j] - ci[j] + c[j]);
        } else {
          for (std::size_t j = 0; j < next.size(); ++j) next[j] -= cfg.lr_model * gd[j];
        }
        w[t] = Tensor(w[t].shape(), std::move(next));
      }
      for (const auto& [k, val] : loss.breakdown) sums[k] += val;
      sums["loss"] += loss.value.item();
      ++steps;
    }
  }

  report.local_steps_taken = steps;
  report.param_delta = names;
  for (std::size_t t = 0; t < w.size(); ++t) {
    std::vector<double> d(w[t].data().begin(), w[t].data().end());
    auto r = names[t].value.data();
    for (std::size_t j = 0; j < d.size(); ++j) d[j] -= r[j];
    report.param_delta[t].value = Tensor(w[t].shape(), std::move(d));
  }
  for (const auto& [k, s] : sums) report.metrics[k] = s / static_cast<double>(steps);
  client.local_params = with_values(received, w);

  if (scaffold && steps > 0) {
    // c_i+ = c_i - c + (theta_received - theta_local) / (steps * lr)
    const double inv = 1.0 / (static_cast<double>(steps) * cfg.lr_model);
    for (std::size_t t = 0; t < w.size(); ++t) {
      std::vector<double> ci(client.scaffold_control[t].value.data().begin(),
                             client.scaffold_control[t].value.data().end());
      auto c = server_control[t].value.data();
      auto d = report.param_delta[t].value.data();
      for (std::size_t j = 0; j < ci.size(); ++j) ci[j] += -c[j] - d[j] * inv;
      client.scaffold_control[t].value = Tensor(w[t].shape(), std::move(ci));
    }
  }
  return report;
}

void aggregate(std::span<const ClientReport> reports, Rule rule, ServerState& server,
               const Config& cfg) {
  if (reports.empty()) throw ContractError("aggregate: no reports");
  std::vector<const ClientReport*> order;
  for (const ClientReport& r : reports) order.push_back(&r);
  std::sort(order.begin(), order.end(),
            [](const ClientReport* a, const ClientReport* b) { return a->client_id < b->client_id; });
  const NamedTensors names = server.global_params.all();
  double n_total = 0.0;
  for (const ClientReport* r : order) {
    check_same_layout(names, r->param_delta, "aggregate");
    if (r->n_virtual <= 0) throw ContractError("aggregate: report with no samples");
    n_total += static_cast<double>(r->n_virtual);
  }

  double tau_eff = 0.0;
  if (rule == Rule::kFedNova) {
    for (const ClientReport* r : order) {
      tau_eff += static_cast<double>(r->n_virtual) / n_total * static_cast<double>(r->local_steps_taken);
    }
  }
  std::vector<Tensor> next;
  for (std::size_t t = 0; t < names.size(); ++t) {
    std::vector<double> step(static_cast<std::size_t>(names[t].value.numel()), 0.0);
    for (const ClientReport* r : order) {
      const double p = static_cast<double>(r->n_virtual) / n_total;
      auto d = r->param_delta[t].value.data();
      if (rule == Rule::kFedNova) {
        if (r->local_steps_taken == 0) continue;
        const double wgt = p / static_cast<double>(r->local_steps_taken);
        for (std::size_t j = 0; j < step.size(); ++j) step[j] += wgt * d[j];
      } else {
        for (std::size_t j = 0; j < step.size(); ++j) step[j] += p * d[j];
      }
    }
    std::vector<double> w(names[t].value.data().begin(), names[t].value.data().end());
    const double s = rule == Rule::kFedNova ? tau_eff : 1.0;
    for (std::size_t j = 0; j < w.size(); ++j) w[j] += s * step[j];
    next.push_back(Tensor(names[t].value.shape(), std::move(w)));
  }

  if (rule == Rule::kScaffold) {
    if (server.scaffold_control.empty()) server.scaffold_control = zeros_like(names);
    const double inv_n = 1.0 / static_cast<double>(order.size());
    NamedTensors c = server.scaffold_control;
    for (std::size_t t = 0; t < names.size(); ++t) {
      auto c_old = server.scaffold_control[t].value.data();
      std::vector<double> dc(c_old.size(), 0.0);
      for (const ClientReport* r : order) {
        if (r->local_steps_taken == 0) continue;
        const double inv = 1.0 / (static_cast<double>(r->local_steps_taken) * cfg.lr_model);
        auto d = r->param_delta[t].value.data();
        for (std::size_t j = 0; j < dc.size(); ++j) dc[j] += -c_old[j] - d[j] * inv;
      }
      std::vector<double> cv(c_old.begin(), c_old.end());
      for (std::size_t j = 0; j < cv.size(); ++j) cv[j] += inv_n * dc[j];
      c[t].value = Tensor(names[t].value.shape(), std::move(cv));
    }
    server.scaffold_control = std::move(c);
  }
  server.global_params = with_values(server.global_params, next);
}

NamedTensors mean_ce_grad(std::span<const ClientReport> reports) {
  if (reports.empty()) throw ContractError("mean_ce_grad: no reports");
  std::vector<const ClientReport*> order;
  for (const ClientReport& r : reports) order.push_back(&r);
  std::sort(order.begin(), order.end(),
            [](const ClientReport* a, const ClientReport* b) { return a->client_id < b->client_id; });
  NamedTensors out = order.front()->ce_grad;
  for (std::size_t t = 0; t < out.size(); ++t) {
    std::vector<double> s(static_cast<std::size_t>(out[t].value.numel()), 0.0);
    for (const ClientReport* r : order) {
      check_same_layout(out, r->ce_grad, "mean_ce_grad");
      auto g = r->ce_grad[t].value.data();
      for (std::size_t j = 0; j < s.size(); ++j) s[j] += g[j];
    }
    for (double& x : s) x /= static_cast<double>(order.size());
    out[t].value = Tensor(out[t].value.shape(), std::move(s));
  }
  return out;
}

Evaluation evaluate(const ModelParams& params, std::span<const LabeledDataset> testsets) {
  Evaluation e;
  double sum = 0.0;
  std::int64_t present = 0;
  for (const LabeledDataset& t : testsets) {
    if (t.size() == 0) {
      e.accuracy.push_back(std::nullopt);
      continue;
    }
    const Tensor logits = logits_no_grad(params, t.images);
    const std::int64_t k = logits.dim(1);
    auto l = logits.data();
    std::int64_t correct = 0;
    for (std::int64_t i = 0; i < t.size(); ++i) {
      const double* row = l.data() + i * k;
      const auto pred = std::max_element(row, row + k) - row;
      correct += pred == t.labels[i];
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(t.size());
    e.accuracy.push_back(acc);
    sum += acc;
    ++present;
  }
  e.average = present ? sum / static_cast<double>(present) : 0.0;
  return e;
}

std::vector<PairMmd> heterogeneity(const ModelParams& model, std::span<const ClientState> clients) {
  const auto n = static_cast<std::int64_t>(clients.size());
  std::vector<std::vector<std::vector<double>>> real(clients.size()), virt(clients.size());
  parallel_for(clients.size(), [&](std::size_t i) {
    const ClientState& c = clients[i];
    real[i] = class_means(model, c.real_train.images, c.real_train.labels, c.real_train.class_count);
    virt[i] = class_means(model, c.virtual_data.images, c.virtual_data.labels, c.virtual_data.class_count);
  });
  std::vector<PairMmd> out;
  for (std::int64_t a = 0; a < n; ++a) {
    for (std::int64_t b = a + 1; b < n; ++b) {
      out.push_back({a, b, mean_distance(real[a], real[b]), mean_distance(virt[a], virt[b])});
    }
  }
  return out;
}

ModelParams initial_model(const Config& cfg, const LabeledDataset& like) {
  const std::uint64_t seed = derive_seed(cfg.seed, {kModelTag});
  if (cfg.arch == Arch::kConvNet) {
    return convnet_init(like.channels(), like.class_count, cfg.width, like.side(), seed);
  }
  return mlp_init(like.channels() * like.side() * like.side(), like.class_count, cfg.width, seed);
}

std::vector<ClientState> build_clients(const Config& cfg) {
  validate_config(cfg);
  std::vector<ClientState> out;
  for (std::size_t i = 0; i < cfg.clients.size(); ++i) {
    const ClientSpec& spec = cfg.clients[i];
    const DatasetSource& s = spec.source;
    ClientState c;
    c.client_id = static_cast<std::int64_t>(i);
    if (s.kind == "blob_digits") {
      const std::uint64_t base = s.has_data_seed ? s.data_seed : derive_seed(cfg.seed, {kTrainDataTag, i});
      BlobDigitsOptions o;
      o.side = s.side;
      c.real_train = blob_digits(s.n_train, derive_seed(base, {0}), o);
      if (s.n_test > 0) {
        c.real_test = blob_digits(s.n_test, derive_seed(base, {1}), o);
      }
    } else {
      c.real_train = load_idx(s.train_images, s.train_labels, true, s.classes);
      if (!s.test_images.empty()) c.real_test = load_idx(s.test_images, s.test_labels, true, s.classes);
      if (s.rgb) {
        c.real_train = lift_to_rgb(c.real_train);
        if (c.real_test.size() > 0) c.real_test = lift_to_rgb(c.real_test);
      }
    }
    c.real_train = synth_domain_shift(c.real_train, spec.shift, derive_seed(cfg.seed, {kShiftTag, i, 0}));
    if (c.real_test.size() > 0) {
      c.real_test = synth_domain_shift(c.real_test, spec.shift, derive_seed(cfg.seed, {kShiftTag, i, 1}));
    } else {
      c.real_test = LabeledDataset{};
    }
    validate_dataset(c.real_train);
    const LabeledDataset& first = out.empty() ? c.real_train : out.front().real_train;
    if (c.real_train.channels() != first.channels() || c.real_train.side() != first.side() ||
        c.real_train.class_count != first.class_count) {
      throw ConfigError("clients[" + std::to_string(i) + "]",
                        "data shape or class count differs from client 0");
    }
    out.push_back(std::move(c));
  }
  return out;
}

ServerState initialize(const Config& cfg, std::vector<ClientState>& clients,
                       std::vector<DistillResult>* warmup) {
  if (clients.empty()) throw ContractError("initialize: no clients");
  ServerState server;
  server.global_params = initial_model(cfg, clients.front().real_train);
  server.stage = Stage::kInit;

  std::vector<ClassStats> stats(clients.size());
  std::vector<DistillResult> results(clients.size());
  parallel_for(clients.size(), [&](std::size_t i) {
    ClientState& c = clients[i];
    const std::uint64_t id = u(c.client_id);
    stats[i] = class_stats(c.real_train);
    VirtualDataset v = init_virtual(stats[i], cfg.ipc, channel_bounds(c.real_train),
                                    derive_seed(cfg.seed, {kVirtualInitTag, id}));
    DistributionMatchOptions dm{.steps = cfg.local_distill_steps,
                                .lr = cfg.lr_pixel_dm,
                                .real_batch_per_class = cfg.dm_real_batch,
                                .augment = cfg.augment,
                                .seed = derive_seed(cfg.seed, {kDistillTag, id, 0})};
    results[i] = distribution_match(c.real_train, v, server.global_params, dm);
    c.virtual_data = results[i].data;
    c.local_params = server.global_params;
    c.scaffold_control.clear();
  });
  if (cfg.rule == Rule::kFedLgd) {
    const ClassStats global = aggregate_stats(stats);
    server.global_virtual = init_virtual(global, cfg.ipc, declared_bounds(clients.front().real_train),
                                         derive_seed(cfg.seed, {kServerInitTag}));
  }
  if (warmup) *warmup = std::move(results);
  return server;
}

RunResult run_pipeline(const Config& cfg, std::vector<ClientState> clients, const RunObserver& observer) {
  validate_config(cfg);
  const bool lgd = cfg.rule == Rule::kFedLgd;
  RunResult result;
  if (lgd && cfg.tau == 0) {
    result.note = "tau = 0: the global virtual data stays at its statistics initialisation";
  }
  ServerState server = initialize(cfg, clients);
  std::vector<LabeledDataset> tests;
  for (const ClientState& c : clients) tests.push_back(c.real_test);

  auto snapshot = [&](std::int64_t round) {
    VirtualSnapshot s;
    s.round = round;
    if (lgd) s.global = server.global_virtual;
    for (const ClientState& c : clients) s.local.push_back(c.virtual_data);
    if (observer.on_snapshot) observer.on_snapshot(s);
    result.snapshots.push_back(std::move(s));
  };
  auto emit = [&](RoundMetrics m) {
    m.eval = evaluate(server.global_params, tests);
    m.mmd = heterogeneity(server.global_params, clients);
    if (observer.on_round) observer.on_round(m);
    result.rounds.push_back(std::move(m));
  };

  RoundMetrics start;
  start.round = 0;
  start.stage = Stage::kInit;
  emit(std::move(start));
  snapshot(0);

  for (std::int64_t round = 1; round <= cfg.rounds; ++round) {
    const bool distill = lgd && round <= cfg.tau;
    server.advance(distill ? Stage::kDistill : Stage::kVirtualTrain);
    server.round = round;
    const auto who = participants(cfg, static_cast<std::int64_t>(clients.size()), round);
    if (cfg.rule == Rule::kScaffold && server.scaffold_control.empty()) {
      server.scaffold_control = zeros_like(server.global_params.all());
    }

    // Broadcast, local training, upload.
    const ModelParams broadcast = server.global_params;
    std::vector<ClientReport> reports(who.size());
    parallel_for(who.size(), [&](std::size_t i) {
      reports[i] = client_update(clients[static_cast<std::size_t>(who[i])], broadcast,
                                 lgd ? &server.global_virtual : nullptr, server.scaffold_control,
                                 cfg, round);
    });
    if (observer.on_reports) observer.on_reports(round, reports);

    // Server: model update, then refresh of the global virtual data against
    // the clients' gradients at the broadcast model.
    RoundMetrics m;
    m.round = round;
    m.stage = server.stage;
    aggregate(reports, cfg.rule, server, cfg);
    if (distill) {
      const NamedTensors target = mean_ce_grad(reports);
      DistillResult gm = gradient_match(server.global_virtual, target, broadcast,
                                        {.steps = cfg.global_distill_steps, .lr = cfg.lr_pixel_gm});
      server.global_virtual = gm.data;
      m.dist_start = gm.initial_loss;
      m.dist = gm.final_loss;

      // Clients refresh their virtual data against the new extractor.
      parallel_for(who.size(), [&](std::size_t i) {
        ClientState& c = clients[static_cast<std::size_t>(who[i])];
        DistributionMatchOptions dm{.steps = cfg.local_distill_steps,
                                    .lr = cfg.lr_pixel_dm,
                                    .real_batch_per_class = cfg.dm_real_batch,
                                    .augment = cfg.augment,
                                    .seed = derive_seed(cfg.seed, {kDistillTag, u(c.client_id), u(round)})};
        c.virtual_data = distribution_match(c.real_train, c.virtual_data, server.global_params, dm).data;
      });
    }
    m.mean_ce = mean_metric(reports, "ce");
    m.mean_con = mean_metric(reports, "con");
    emit(std::move(m));
    if (lgd && round == cfg.tau) snapshot(round);
  }
  if (cfg.rounds > 0 && !(lgd && cfg.tau == cfg.rounds)) snapshot(cfg.rounds);
  result.server = std::move(server);
  return result;
}

Container report_to_container(const ClientReport& r) {
  Container c;
  c.kind = "report";
  c.meta = {{"client_id", r.client_id},
            {"n_virtual", r.n_virtual},
            {"local_steps_taken", r.local_steps_taken},
            {"metrics", r.metrics}};
  for (const NamedTensor& t : r.param_delta) c.tensors.push_back({"param_delta/" + t.name, t.value.detach()});
  for (const NamedTensor& t : r.ce_grad) c.tensors.push_back({"ce_grad/" + t.name, t.value.detach()});
  return c;
}

ClientReport report_from_container(const Container& c) {
  if (c.kind != "report") throw ContractError("container kind '" + c.kind + "' is not 'report'");
  ClientReport r;
  try {
    r.client_id = c.meta.at("client_id").get<std::int64_t>();
    r.n_virtual = c.meta.at("n_virtual").get<std::int64_t>();
    r.local_steps_taken = c.meta.at("local_steps_taken").get<std::int64_t>();
    r.metrics = c.meta.at("metrics").get<std::map<std::string, double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("report container: bad metadata: ") + e.what());
  }
  for (const NamedTensor& t : c.tensors) {
    const auto slash = t.name.find('/');
    const std::string group = t.name.substr(0, slash);
    const std::string name = slash == std::string::npos ? "" : t.name.substr(slash + 1);
    if (group == "param_delta") {
      r.param_delta.push_back({name, t.value});
    } else if (group == "ce_grad") {
      r.ce_grad.push_back({name, t.value});
    } else {
      throw ContractError("report container: unexpected tensor '" + t.name + "'");
    }
  }
  return r;
}

}  // namespace fedvirt
