#pragma once

#include "fedsim/data.hpp"
#include "fedsim/params.hpp"
#include "fedsim/peft.hpp"
#include "fedsim/vit.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace fedsim {

enum class UpdateMode { full, modular, head_only };

std::string update_mode_name(UpdateMode mode);
UpdateMode update_mode_from_name(const std::string& name);

struct FedConfig {
  int rounds = 150;            // T
  int clients_per_round = 0;   // M; 0 means the whole population
  int local_epochs = 1;        // E
  int batch_size = 32;
  double lr_peak = 0.05;
  double warmup_fraction = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double prox_mu = 0.0;        // > 0 adds the proximal term (FedProx)
  UpdateMode update_mode = UpdateMode::modular;
  int personal_epochs = 5;     // personalization phase length (fedavg_local)
  int eval_every = 0;          // 0 = evaluate only at the end
  bool sparse_wire = false;    // aggregate via K*P zero-padded vectors
  bool round_digests = false;  // record per-round per-task parameter digests
  int threads = 0;             // worker threads for client training; 0 = auto
  uint64_t seed = 0;
};

void validate_config(const FedConfig& cfg, size_t population);

// Warmup ramp 0 -> lr_peak over floor(warmup_fraction*total) steps, then
// cosine decay lr_peak -> 0 over the remainder.
double lr_at(int64_t step, int64_t total_steps, const FedConfig& cfg);

// How a trainable set runs against the (optional) frozen backbone.
struct TaskSetup {
  ModelConfig config;
  UpdateMode mode = UpdateMode::modular;
  ModuleSpec spec;  // ignored in full mode; kind head_only in head_only mode
  std::shared_ptr<const ParamSet> backbone;  // null in full mode
};

VitOutput task_forward(const TaskSetup& setup, const ParamSet& trainable, const Tensor& images);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

EvalResult evaluate(const TaskSetup& setup, const ParamSet& trainable, const Dataset& ds,
                    const std::vector<size_t>& indices, int batch_size);

// One participant: immutable identity plus index lists into the task dataset.
// Momentum buffers are round-local (fresh per local_tuning call), so no
// optimizer state lives here.
struct ClientState {
  int client_id = 0;
  int task_id = 0;
  std::vector<size_t> train_indices;
  std::vector<size_t> test_indices;
};

// E epochs of mini-batch SGD with momentum on the client's train split,
// starting from (a copy of) w_start. Batch order is fixed by
// (cfg.seed, round, client_id). With prox_mu > 0 the loss carries
// (mu/2)*||w - w_start||^2 over trainable entries. Returns the updated set.
ParamSet local_tuning(const ClientState& client, const ParamSet& w_start, const Dataset& data,
                      const TaskSetup& setup, const FedConfig& cfg, int round);

// Personalization: fresh LR schedule spanning personal_epochs, same optimizer.
ParamSet personal_tuning(const ClientState& client, const ParamSet& w_start, const Dataset& data,
                         const TaskSetup& setup, const FedConfig& cfg);

// Uniform sample of m distinct ids from [0, population), ascending.
std::vector<int> sample_clients(size_t population, int m, uint64_t seed, int round);

// Sample-count-weighted mean reduced in the given order. Equal counts use the
// plain sum/count mean; unequal counts compute sum(x*n)/sum(n). Exact zeros
// are canonicalized to +0.0 so both aggregation paths agree bitwise.
std::vector<double> average_flat(const std::vector<const std::vector<double>*>& vecs,
                                 const std::vector<int64_t>& counts);

// One task in a federation: its dataset, how to run it, and the server-held
// trainable set.
struct FedTask {
  int task_id = 0;
  const Dataset* data = nullptr;
  TaskSetup setup;
  ParamSet w_train;
};

struct RoundTrace {
  int round = 0;
  int task_id = 0;
  std::vector<int> sampled_clients;  // this task's contributors, ascending
  double train_loss = 0.0;           // mean batch loss over contributors
  std::optional<double> eval_acc;    // present when this round evaluated
  int64_t params_up = 0;             // scalars uploaded by contributors
  int64_t params_down = 0;           // scalars downloaded by contributors
};

struct RunResult {
  std::vector<ParamSet> task_params;    // final server state per task
  std::vector<ParamSet> client_params;  // per-client models (schemes that keep them)
  std::vector<RoundTrace> traces;
  std::vector<EvalResult> client_eval;  // final per-client eval on test splits
  int64_t backbone_scalars_down = 0;    // one-time round-0 backbone distribution
  // [round][task] digest after that round's aggregation (cfg.round_digests).
  std::vector<std::vector<std::string>> round_digests;
};

// The round engine shared by every scheme: sample M clients from the whole
// population, train each against its task's current trainable set (in
// parallel; reduction order is ascending client_id), average within each
// task, leave unsampled tasks untouched.
RunResult run_federated(std::vector<FedTask> tasks, const std::vector<ClientState>& clients,
                        const FedConfig& cfg);

enum class Scheme { local_only, fedavg, fedavg_local };

std::string scheme_name(Scheme s);
Scheme scheme_from_name(const std::string& name);

// Single-task schemes. local_only trains every client independently for the
// same T*E budget; fedavg_local appends a personalization pass per client.
RunResult run_scheme(Scheme scheme, FedTask task, const std::vector<ClientState>& clients,
                     const FedConfig& cfg);

// Multitask: clients carry task ids; one trainable set per task.
RunResult run_fedyolo(std::vector<FedTask> tasks, const std::vector<ClientState>& clients,
                      const FedConfig& cfg);

}  // namespace fedsim
