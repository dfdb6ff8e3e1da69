#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedvirt/config.h"
#include "fedvirt/distillation.h"

namespace fedvirt {

enum class Stage { kInit, kDistill, kVirtualTrain };
std::string stage_name(Stage stage);

struct ClientState {
  std::int64_t client_id = 0;
  LabeledDataset real_train;  // private: read only by client-side code
  LabeledDataset real_test;
  VirtualDataset virtual_data;
  ModelParams local_params;
  NamedTensors scaffold_control;  // c_i, zero until the first scaffold round
};

struct ServerState {
  ModelParams global_params;
  VirtualDataset global_virtual;  // empty unless the rule is fedlgd
  std::int64_t round = 0;
  Stage stage = Stage::kInit;
  NamedTensors scaffold_control;  // c

  // Stages only move forward: init -> distill -> virtual_train.
  void advance(Stage next);
};

// The only payload a client sends to the server.
struct ClientReport {
  std::int64_t client_id = 0;
  NamedTensors param_delta;  // local params after training minus received params
  NamedTensors ce_grad;      // mean CE gradient on the local virtual set at the received params
  std::int64_t n_virtual = 0;
  std::int64_t local_steps_taken = 0;
  std::map<std::string, double> metrics;  // batch means of the loss terms
};

// Trains a copy of `global` on the client's virtual data for E epochs of
// class-balanced batches. fedlgd pairs each local batch with a balanced batch
// of `global_virtual` under total_loss; fedprox adds the proximal term;
// scaffold corrects each gradient by c - c_i and then updates c_i.
ClientReport client_update(ClientState& client, const ModelParams& global,
                           const VirtualDataset* global_virtual,
                           const NamedTensors& server_control, const Config& cfg,
                           std::int64_t round);

// Server update from reports (any order; processed by ascending client id).
//   fedavg, fedprox, fedlgd: theta += sum_i p_i delta_i, p_i = n_i / n
//   fednova: theta += (sum_i p_i tau_i) * sum_i p_i delta_i / tau_i
//   scaffold: the fedavg step, then c += (1/N) sum_i dc_i with
//             dc_i = -c - delta_i / (tau_i * lr_model)
// Clients that took no local step are left out of the fednova and scaffold
// sums.
void aggregate(std::span<const ClientReport> reports, Rule rule, ServerState& server,
               const Config& cfg);

// Unweighted mean of the reports' ce_grad sets.
NamedTensors mean_ce_grad(std::span<const ClientReport> reports);

struct Evaluation {
  std::vector<std::optional<double>> accuracy;  // absent for empty test sets
  double average = 0.0;                         // unweighted over present clients
};
Evaluation evaluate(const ModelParams& params, std::span<const LabeledDataset> testsets);

struct PairMmd {
  std::int64_t a = 0;
  std::int64_t b = 0;
  double real = 0.0;
  double virt = 0.0;
};

struct RoundMetrics {
  std::int64_t round = 0;
  Stage stage = Stage::kInit;
  Evaluation eval;
  std::optional<double> mean_ce;
  std::optional<double> mean_con;
  std::optional<double> dist_start;
  std::optional<double> dist;
  std::vector<PairMmd> mmd;
};

struct VirtualSnapshot {
  std::int64_t round = 0;
  std::optional<VirtualDataset> global;
  std::vector<VirtualDataset> local;  // by client
};

struct RunResult {
  std::vector<RoundMetrics> rounds;
  ServerState server;
  std::vector<VirtualSnapshot> snapshots;  // after rounds 0, tau and T
  std::string note;
};

struct RunObserver {
  std::function<void(const RoundMetrics&)> on_round;
  std::function<void(std::int64_t round, std::span<const ClientReport>)> on_reports;
  std::function<void(const VirtualSnapshot&)> on_snapshot;
};

// Builds the clients' datasets from the config.
std::vector<ClientState> build_clients(const Config& cfg);
ModelParams initial_model(const Config& cfg, const LabeledDataset& like);

// Stage 1 only: statistics, initial virtual data and the warm-up distribution
// match. Returns the server state after initialisation; `warmup`, when given,
// receives each client's distribution-match result.
ServerState initialize(const Config& cfg, std::vector<ClientState>& clients,
                       std::vector<DistillResult>* warmup = nullptr);

RunResult run_pipeline(const Config& cfg, std::vector<ClientState> clients,
                       const RunObserver& observer = {});

// Per-pair feature MMD of the clients' real and virtual data under `model`.
std::vector<PairMmd> heterogeneity(const ModelParams& model, std::span<const ClientState> clients);

// Container kind "report".
Container report_to_container(const ClientReport& r);
ClientReport report_from_container(const Container& c);

}  // namespace fedvirt
