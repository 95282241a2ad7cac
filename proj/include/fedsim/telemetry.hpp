#pragma once

#include "fedsim/data.hpp"
#include "fedsim/fl.hpp"
#include "fedsim/params.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace fedsim {

// ---- communication ledger ---------------------------------------------------

enum class Direction { up, down };

struct CommRecord {
  int round = 0;
  int client_id = 0;
  int task_id = 0;
  Direction dir = Direction::up;
  int64_t param_count = 0;
  int64_t bytes = 0;  // always 4 * param_count: 32-bit floats, no compression
};

// Per-transmission log. Single writer (the server loop / the builder below);
// totals are maintained incrementally and always equal the record sums.
class CommLedger {
 public:
  void add(int round, int client_id, int task_id, Direction dir, int64_t param_count);

  const std::vector<CommRecord>& records() const { return records_; }
  int64_t total_params(Direction dir) const;
  int64_t total_bytes(Direction dir) const { return 4 * total_params(dir); }

 private:
  std::vector<CommRecord> records_;
  int64_t up_params_ = 0;
  int64_t down_params_ = 0;
};

// Expands a finished run into per-client records: one up and one down record
// per contributor per round, plus one round-0 backbone download per client of
// a modular/head_only task (the "load once" accounting). setups must be the
// task setups the run was built with, indexed by task_id.
CommLedger ledger_from_run(const RunResult& rr, const std::vector<ClientState>& clients,
                           const std::vector<TaskSetup>& setups);

// Headline cost in transmitted parameters, upload-only convention.
int64_t comm_cost(int64_t rounds, int64_t clients_per_round, int64_t params_per_client);

// ---- paper metrics ------------------------------------------------------------

// (before - after) / before; negative means the tuned model improved.
double forgetting_ratio(double acc_global_before, double acc_global_after);

// (hom - het) / hom: relative accuracy drop under heterogeneity.
double hetero_drop(double acc_hom, double acc_het);

struct ReprSimilarity {
  double mean_cosine = 0.0;
  int used = 0;
  int skipped = 0;  // zero-norm representations
};

// Mean cosine between the two models' final-LN class-token representations
// over the given samples. Zero-norm features are skipped and counted; all
// samples skipped is an error.
ReprSimilarity repr_similarity(const TaskSetup& setup_a, const ParamSet& model_a,
                               const TaskSetup& setup_b, const ParamSet& model_b,
                               const Dataset& ds, const std::vector<size_t>& indices,
                               int batch_size);

// ---- evaluation rollups ---------------------------------------------------------

struct MetricsRow {
  int round = -1;
  double global_acc = 0.0;            // pooled accuracy over every task's test union
  double mean_local_acc = 0.0;        // plain mean over clients of per-client accuracy
  std::vector<double> per_task_acc;   // task-model accuracy on that task's test union
  double loss = 0.0;                  // pooled mean loss over the test unions
};

struct TaskEval {
  TaskSetup setup;
  const Dataset* data = nullptr;
  const ParamSet* model = nullptr;  // the task's (global) model
};

// Scores global task models on pooled test splits, and per-client accuracy on
// each client's own split. client_models, when non-empty, supplies one model
// per client (personalized/local schemes); otherwise each client is scored
// under its task's global model. Every client must have a test split.
MetricsRow evaluate_metrics(int round, const std::vector<TaskEval>& tasks,
                            const std::vector<ClientState>& clients,
                            const std::vector<const ParamSet*>& client_models, int batch_size);

// ---- serialization ----------------------------------------------------------------

// Compact JSON with traces, final per-client eval, and digests when recorded.
std::string run_to_json(const RunResult& rr);

// CSV schemas (stable column order, one header line):
//   rounds:  round,task,clients,loss,acc,params_tx   (clients ';'-joined,
//            acc empty when that round did not evaluate, params_tx = upload)
//   comm:    round,client,task,dir,params,bytes
//   metrics: round,global_acc,mean_local_acc,per_task_acc,loss
//            (per_task_acc ';'-joined)
void write_round_csv(const RunResult& rr, const std::string& path);
void write_comm_csv(const CommLedger& ledger, const std::string& path);
void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path);

}  // namespace fedsim
