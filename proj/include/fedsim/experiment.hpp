#pragma once

#include "fedsim/data.hpp"
#include "fedsim/fl.hpp"
#include "fedsim/peft.hpp"
#include "fedsim/telemetry.hpp"
#include "fedsim/vit.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace fedsim {

inline constexpr int kResultSchemaVersion = 1;

// Training schemes at the experiment level: the three single-task schemes,
// the proximal variant, and the multitask protocol.
enum class ExpScheme { local_only, fedavg, fedavg_local, fedprox, fedyolo };

std::string exp_scheme_name(ExpScheme s);
ExpScheme exp_scheme_from_name(const std::string& name);

// One synthetic task and how its clients carve it up. Zeros mean "derive":
// classes from the preset, samples_per_client from an even share, data_seed
// from the run seed.
struct TaskConfig {
  int classes = 0;
  int samples_per_class = 50;
  double noise = 0.1;
  int clients = 4;
  int classes_per_client = 0;  // 0 = homogeneous (every class reachable)
  int samples_per_client = 0;
  double train_fraction = 0.8;
  uint64_t data_seed = 0;
};

// Optional upstream phase: fit the full model centrally on a held-out
// synthetic task, then reuse its body as the "pretrained" backbone.
struct PretrainConfig {
  bool enabled = false;
  int classes = 8;
  int samples_per_class = 40;
  double noise = 0.05;
  int epochs = 3;
  int batch_size = 32;
  double lr_peak = 0.01;
  uint64_t data_seed = 0;
};

struct ExperimentConfig {
  std::string preset_name = "micro";
  ExpScheme scheme = ExpScheme::fedavg;
  UpdateMode update_mode = UpdateMode::modular;
  ModuleSpec module;
  FedConfig fed;  // fed.seed/fed.threads mirror the top-level fields
  std::vector<TaskConfig> tasks;
  PretrainConfig pretrain;
  std::string out_dir = "fedsim_out";
  uint64_t seed = 0;
};

// Parses the JSON text into a config, collecting type/field errors as
// "path: reason" strings instead of throwing. A malformed document yields a
// single parse error. Missing fields keep their defaults for validate to fill.
ExperimentConfig parse_experiment(const std::string& text, std::vector<std::string>& errors);

// Range and cross-field checks; normalizes in place (task class counts from
// the preset, per-client shares, seed plumbed into fed). Returns every
// violation as "path: reason"; an empty list means cfg is runnable as-is.
std::vector<std::string> validate_experiment(ExperimentConfig& cfg);

// Normalized echo: every field explicit, keys sorted, parseable back.
std::string experiment_to_json(const ExperimentConfig& cfg);

// Content hash of the inputs that determine results: the normalized config
// minus output location and thread count.
std::string experiment_fingerprint(const ExperimentConfig& cfg);

struct RunArtifacts {
  RunResult result;
  MetricsRow final_metrics;
  CommLedger ledger;
  std::vector<int64_t> params_per_client;  // transmitted scalars, per task
  bool has_forgetting = false;             // fedavg_local only
  double acc_before_personalization = 0.0;
  double acc_after_personalization = 0.0;
  double forgetting = 0.0;
  std::string result_json;                 // what run() wrote to result.json
  std::vector<std::string> files;          // artifact paths, result.json last
};

// Builds the world from a validated config, runs the scheme, and writes
// rounds.csv, metrics.csv, comm.csv, checkpoints, and result.json into
// cfg.out_dir. Deterministic for a given (config, seed) except the timing
// block of result.json.
RunArtifacts run_experiment(const ExperimentConfig& cfg);

struct ReportRow {
  std::string dir;
  std::string scheme;
  std::string mode;
  std::string module_kind;
  int rounds = 0;
  double global_acc = 0.0;
  double mean_local_acc = 0.0;
  bool has_forgetting = false;
  double forgetting = 0.0;
  int64_t up_bytes = 0;
  double comm_x = 1.0;     // first run's upload bytes / this run's
  bool comm_x_valid = false;
  double drop_vs_first = 0.0;  // relative accuracy drop vs the first run
  bool drop_valid = false;
};

struct Report {
  std::vector<ReportRow> rows;
  bool comm_flag = false;  // some run moves >=100x less than the baseline
  std::string text;
  std::string csv;
};

// Reads result.json from each directory (first dir = baseline row) and
// tabulates final accuracies, forgetting, communication totals, and the
// against-baseline ratios. Throws on missing/corrupt files or a schema
// version this build does not understand.
Report report_runs(const std::vector<std::string>& dirs);

// One cell of the parameter-count table, as published: trainable scalars for
// full / header / adapter / lora / vpt. head_excluded marks the one published
// cell (ViT-L adapter) that omits the classifier head.
struct CountCell {
  std::string preset_name;
  std::string method;
  int64_t count = 0;
  bool head_excluded = false;
};

CountCell count_cell(const std::string& preset_name, const std::string& method);
std::vector<CountCell> count_table();  // vit_t/s/b/l x all five methods
std::string format_count_table(const std::vector<CountCell>& cells);

}  // namespace fedsim
