#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fedsim/data.hpp"
#include "fedsim/fl.hpp"
#include "fedsim/params.hpp"
#include "fedsim/peft.hpp"
#include "fedsim/telemetry.hpp"
#include "fedsim/tensor.hpp"
#include "fedsim/vit.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

using namespace fedsim;

namespace {

std::vector<size_t> iota_indices(size_t from, size_t count) {
  std::vector<size_t> v(count);
  std::iota(v.begin(), v.end(), from);
  return v;
}

ClientState make_client(int id, int task, std::vector<size_t> train,
                        std::vector<size_t> test = {}) {
  return ClientState{id, task, std::move(train), std::move(test)};
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(static_cast<bool>(in));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(s);
  while (std::getline(in, field, sep)) out.push_back(field);
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

// Two adapter tasks on one shared frozen backbone, three clients each,
// two rounds with partial sampling and one evaluated round.
struct MiniFed {
  ModelConfig mc = preset("micro");
  Dataset data0, data1;
  std::shared_ptr<const ParamSet> backbone;
  TaskSetup setup0, setup1;
  std::vector<ClientState> clients;
  FedConfig cfg;
  int64_t p0 = 0, p1 = 0;  // trainable scalars per task

  MiniFed() {
    data0 = synth_task(mc.num_classes, 6, mc.image_size, 0.1, 100);
    data1 = synth_task(mc.num_classes, 6, mc.image_size, 0.1, 200);
    backbone = freeze_backbone(build_vit(mc, 7));
    ModuleSpec spec;
    spec.kind = ModuleKind::adapter;
    spec.bottleneck_dim = 4;
    AdaptedModel m0 = attach(backbone, mc, spec, 31);
    AdaptedModel m1 = attach(backbone, mc, spec, 32);
    setup0 = TaskSetup{mc, UpdateMode::modular, spec, backbone};
    setup1 = TaskSetup{mc, UpdateMode::modular, spec, backbone};
    p0 = m0.module_params.scalar_count(true);
    p1 = m1.module_params.scalar_count(true);
    w0_.push_back(std::move(m0.module_params));
    w0_.push_back(std::move(m1.module_params));
    for (int i = 0; i < 3; ++i) {
      clients.push_back(make_client(i, 0, iota_indices(static_cast<size_t>(4 * i), 4),
                                    iota_indices(static_cast<size_t>(4 * i) + 12, 2)));
    }
    for (int i = 0; i < 3; ++i) {
      clients.push_back(make_client(3 + i, 1, iota_indices(static_cast<size_t>(4 * i), 4),
                                    iota_indices(static_cast<size_t>(4 * i) + 12, 2)));
    }
    cfg.rounds = 2;
    cfg.clients_per_round = 3;
    cfg.local_epochs = 1;
    cfg.batch_size = 4;
    cfg.lr_peak = 0.05;
    cfg.warmup_fraction = 0.0;
    cfg.momentum = 0.9;
    cfg.eval_every = 2;
    cfg.seed = 11;
  }

  std::vector<FedTask> tasks() {
    std::vector<FedTask> v;
    v.push_back(FedTask{0, &data0, setup0, w0_[0].clone()});
    v.push_back(FedTask{1, &data1, setup1, w0_[1].clone()});
    return v;
  }

  std::vector<TaskSetup> setups() const { return {setup0, setup1}; }

 private:
  std::vector<ParamSet> w0_;
};

}  // namespace

// ---- headline cost arithmetic ------------------------------------------------

TEST_CASE("comm cost: rounds x clients x params, upload-only") {
  // 150 rounds, 5 clients/round, ViT-T adapter (58,564 scalars).
  CHECK(comm_cost(150, 5, 58564) == 43'923'000);
  CHECK(comm_cost(0, 5, 58564) == 0);
  CHECK(comm_cost(150, 0, 58564) == 0);

  // Full ViT-L vs its adapter set: the per-round ratio exceeds two orders of
  // magnitude, and multiplying both sides by the same T and M preserves it.
  const int64_t full = 303'404'132;
  const int64_t adapter = 417'984;
  double ratio = static_cast<double>(comm_cost(150, 5, full)) /
                 static_cast<double>(comm_cost(150, 5, adapter));
  CHECK(ratio == doctest::Approx(725.875).epsilon(1e-3));
  CHECK(ratio > 100.0);

  CHECK_THROWS_AS(comm_cost(-1, 5, 10), std::invalid_argument);
  CHECK_THROWS_AS(comm_cost(1, -5, 10), std::invalid_argument);
  CHECK_THROWS_AS(comm_cost(1, 5, -10), std::invalid_argument);
}

// ---- ratio metrics -----------------------------------------------------------

TEST_CASE("forgetting ratio: relative drop from the pre-tuning accuracy") {
  CHECK(forgetting_ratio(0.8, 0.8) == 0.0);
  CHECK(forgetting_ratio(0.8, 0.6) == doctest::Approx(0.25).epsilon(1e-12));
  // Improvement shows up as a negative ratio.
  CHECK(forgetting_ratio(0.5, 0.55) == doctest::Approx(-0.1).epsilon(1e-12));

  // Scale-free: rescaling both accuracies by the same factor changes nothing.
  CHECK(forgetting_ratio(3.7 * 0.8, 3.7 * 0.6) ==
        doctest::Approx(forgetting_ratio(0.8, 0.6)).epsilon(1e-12));

  CHECK_THROWS_AS(forgetting_ratio(0.0, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(forgetting_ratio(-0.1, 0.5), std::invalid_argument);
}

TEST_CASE("heterogeneity drop: relative accuracy lost vs the homogeneous split") {
  CHECK(hetero_drop(0.7, 0.7) == 0.0);
  CHECK(hetero_drop(1.0, 0.5) == doctest::Approx(0.5).epsilon(1e-12));
  // Sign carries the direction: positive iff heterogeneity hurt.
  CHECK(hetero_drop(0.687, 0.409) > 0.0);
  CHECK(hetero_drop(0.5, 0.6) < 0.0);

  CHECK(hetero_drop(3.7 * 1.0, 3.7 * 0.5) ==
        doctest::Approx(hetero_drop(1.0, 0.5)).epsilon(1e-12));

  CHECK_THROWS_AS(hetero_drop(0.0, 0.5), std::invalid_argument);
}

// ---- ledger ------------------------------------------------------------------

TEST_CASE("ledger accumulates 4-byte-per-scalar records and split totals") {
  CommLedger ledger;
  ledger.add(0, 1, 0, Direction::up, 100);
  ledger.add(0, 2, 0, Direction::down, 50);
  ledger.add(1, 1, 0, Direction::up, 7);

  REQUIRE(ledger.records().size() == 3);
  CHECK(ledger.records()[0].bytes == 400);
  CHECK(ledger.records()[1].bytes == 200);
  CHECK(ledger.total_params(Direction::up) == 107);
  CHECK(ledger.total_params(Direction::down) == 50);
  CHECK(ledger.total_bytes(Direction::up) == 428);
  CHECK(ledger.total_bytes(Direction::down) == 200);

  CHECK_THROWS_AS(ledger.add(0, 0, 0, Direction::up, -1), std::invalid_argument);
  CHECK(ledger.records().size() == 3);  // the failed add left no record
  CHECK(ledger.total_params(Direction::up) == 107);
}

TEST_CASE("ledger expansion reconciles with the run's own accounting") {
  MiniFed fed;
  RunResult rr = run_fedyolo(fed.tasks(), fed.clients, fed.cfg);
  CommLedger ledger = ledger_from_run(rr, fed.clients, fed.setups());

  // Totals: uploads match the traces exactly; downloads add the one-time
  // backbone distribution on top of the per-round module downloads.
  int64_t traced_up = 0, traced_down = 0;
  size_t contributors = 0;
  for (const auto& t : rr.traces) {
    traced_up += t.params_up;
    traced_down += t.params_down;
    contributors += t.sampled_clients.size();
  }
  CHECK(ledger.total_params(Direction::up) == traced_up);
  CHECK(ledger.total_params(Direction::down) == traced_down + rr.backbone_scalars_down);
  CHECK(ledger.total_bytes(Direction::up) == 4 * traced_up);

  // Record census: one up + one down per contributor per round, plus one
  // backbone download per client (every client here runs a modular task).
  REQUIRE(ledger.records().size() == 2 * contributors + fed.clients.size());

  const int64_t backbone_scalars = fed.backbone->scalar_count(false);
  size_t backbone_records = 0;
  for (const auto& r : ledger.records()) {
    CHECK(r.bytes == 4 * r.param_count);
    const int64_t module_p = r.task_id == 0 ? fed.p0 : fed.p1;
    if (r.param_count == backbone_scalars && r.dir == Direction::down && r.round == 0 &&
        r.param_count != module_p) {
      ++backbone_records;
      continue;
    }
    // After the initial distribution only module-sized payloads move.
    CHECK(r.param_count == module_p);
  }
  CHECK(backbone_records == fed.clients.size());
  CHECK(fed.clients.size() * static_cast<size_t>(backbone_scalars) ==
        static_cast<size_t>(rr.backbone_scalars_down));

  // Upload total spelled out: sum over rounds of contributors x module size.
  int64_t expected_up = 0;
  for (const auto& t : rr.traces) {
    expected_up += static_cast<int64_t>(t.sampled_clients.size()) *
                   (t.task_id == 0 ? fed.p0 : fed.p1);
  }
  CHECK(ledger.total_params(Direction::up) == expected_up);
}

TEST_CASE("ledger expansion of a local-only run is empty") {
  MiniFed fed;
  std::vector<ClientState> clients(fed.clients.begin(), fed.clients.begin() + 3);
  FedConfig cfg = fed.cfg;
  cfg.clients_per_round = 0;
  cfg.rounds = 1;
  RunResult rr = run_scheme(Scheme::local_only, std::move(fed.tasks()[0]), clients, cfg);

  CommLedger ledger = ledger_from_run(rr, clients, {fed.setup0});
  CHECK(ledger.records().empty());
  CHECK(ledger.total_params(Direction::up) == 0);
  CHECK(ledger.total_params(Direction::down) == 0);
}

TEST_CASE("ledger expansion rejects inconsistent run records") {
  MiniFed fed;

  RunResult bad_trace;
  RoundTrace t;
  t.round = 0;
  t.task_id = 0;
  t.sampled_clients = {0, 1};
  t.params_up = 3;  // not divisible by the two contributors
  t.params_down = 4;
  bad_trace.traces.push_back(t);
  std::vector<ClientState> clients(fed.clients.begin(), fed.clients.begin() + 2);
  CHECK_THROWS_AS(ledger_from_run(bad_trace, clients, {fed.setup0}), std::logic_error);

  RunResult bad_backbone;
  bad_backbone.backbone_scalars_down = 12345;  // nothing in the setups explains it
  TaskSetup full{fed.mc, UpdateMode::full, ModuleSpec{}, nullptr};
  CHECK_THROWS_AS(ledger_from_run(bad_backbone, clients, {full}), std::logic_error);
}

// ---- representation similarity -------------------------------------------------

TEST_CASE("repr similarity: identical models agree, negated features oppose") {
  ModelConfig mc = preset("micro");
  Dataset ds = synth_task(mc.num_classes, 3, mc.image_size, 0.1, 21);
  ParamSet model = build_vit(mc, 7);
  TaskSetup setup{mc, UpdateMode::full, ModuleSpec{}, nullptr};
  std::vector<size_t> idx = iota_indices(0, 10);

  ReprSimilarity same = repr_similarity(setup, model, setup, model, ds, idx, 4);
  CHECK(same.used == 10);
  CHECK(same.skipped == 0);
  CHECK(same.mean_cosine == doctest::Approx(1.0).epsilon(1e-9));

  // Negating the final layer-norm gain and bias negates every representation
  // exactly, flipping each cosine to -1.
  ParamSet negated = model.clone();
  for (double& v : negated.at("final_ln.g").raw_data()) v = -v;
  for (double& v : negated.at("final_ln.b").raw_data()) v = -v;
  ReprSimilarity opposed = repr_similarity(setup, model, setup, negated, ds, idx, 4);
  CHECK(opposed.used == 10);
  CHECK(opposed.mean_cosine == doctest::Approx(-1.0).epsilon(1e-9));
}

TEST_CASE("repr similarity matches a hand-rolled cosine over the same features") {
  ModelConfig mc = preset("micro");
  Dataset ds = synth_task(mc.num_classes, 3, mc.image_size, 0.1, 21);
  auto backbone = freeze_backbone(build_vit(mc, 7));
  // Prompt modules perturb the forward pass from the moment they attach
  // (adapters and LoRA are no-ops at init), so two seeds give two genuinely
  // different representation maps.
  ModuleSpec spec;
  spec.kind = ModuleKind::prompt;
  spec.prompt_len = 2;
  AdaptedModel a = attach(backbone, mc, spec, 31);
  AdaptedModel b = attach(backbone, mc, spec, 32);
  TaskSetup setup{mc, UpdateMode::modular, spec, backbone};
  std::vector<size_t> idx = iota_indices(0, 10);

  ReprSimilarity rs =
      repr_similarity(setup, a.module_params, setup, b.module_params, ds, idx, 4);

  // Oracle: one full-batch forward per model, cosine per row. Rows are
  // independent under every op, so the 4/4/2 batching above must not matter.
  NoGradGuard no_grad;
  auto [images, labels] = gather(ds, idx);
  (void)labels;
  Tensor ra = task_forward(setup, a.module_params, images).cls_repr;
  Tensor rb = task_forward(setup, b.module_params, images).cls_repr;
  const size_t dim = static_cast<size_t>(ra.dim(1));
  double mean = 0.0;
  for (size_t r = 0; r < idx.size(); ++r) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t j = 0; j < dim; ++j) {
      dot += ra.data()[r * dim + j] * rb.data()[r * dim + j];
      na += ra.data()[r * dim + j] * ra.data()[r * dim + j];
      nb += rb.data()[r * dim + j] * rb.data()[r * dim + j];
    }
    mean += dot / (std::sqrt(na) * std::sqrt(nb));
  }
  mean /= static_cast<double>(idx.size());

  CHECK(rs.used == 10);
  CHECK(rs.skipped == 0);
  CHECK(rs.mean_cosine == doctest::Approx(mean).epsilon(1e-12));
  CHECK(rs.mean_cosine > -1.0);
  CHECK(rs.mean_cosine < 1.0);
}

TEST_CASE("repr similarity skips zero-norm features and rejects an empty mean") {
  ModelConfig mc = preset("micro");
  Dataset ds = synth_task(mc.num_classes, 3, mc.image_size, 0.1, 21);
  ParamSet model = build_vit(mc, 7);
  TaskSetup setup{mc, UpdateMode::full, ModuleSpec{}, nullptr};

  // Zero gain and bias collapse every representation to exactly zero.
  ParamSet dead = model.clone();
  for (double& v : dead.at("final_ln.g").raw_data()) v = 0.0;
  for (double& v : dead.at("final_ln.b").raw_data()) v = 0.0;
  CHECK_THROWS_AS(repr_similarity(setup, model, setup, dead, ds, iota_indices(0, 4), 2),
                  std::runtime_error);

  CHECK_THROWS_AS(repr_similarity(setup, model, setup, model, ds, {}, 2),
                  std::invalid_argument);
  CHECK_THROWS_AS(repr_similarity(setup, model, setup, model, ds, iota_indices(0, 4), 0),
                  std::invalid_argument);
}

// ---- metric rollups ------------------------------------------------------------

namespace {

// Trains the full micro model to memorize a 12-sample task; REQUIREs it got
// there so downstream checks can assert exact accuracies.
struct Memorized {
  ModelConfig mc = preset("micro");
  Dataset ds;
  TaskSetup setup;
  ParamSet model;

  Memorized() : ds(synth_task(preset("micro").num_classes, 3, preset("micro").image_size,
                              0.05, 77)),
                setup{mc, UpdateMode::full, ModuleSpec{}, nullptr},
                model(build_vit(mc, 9)) {
    FedConfig cfg;
    cfg.rounds = 1;
    cfg.local_epochs = 300;
    cfg.batch_size = 12;
    cfg.lr_peak = 0.02;
    cfg.warmup_fraction = 0.1;
    cfg.momentum = 0.9;
    cfg.seed = 5;
    ClientState all = make_client(0, 0, iota_indices(0, 12));
    model = local_tuning(all, model, ds, setup, cfg, 0);
    REQUIRE(evaluate(setup, model, ds, iota_indices(0, 12), 12).accuracy == 1.0);
  }
};

// Zeroed head: every logit is exactly zero, argmax breaks ties to class 0,
// so a balanced 4-class set scores exactly 1/4 and loss ln(4).
ParamSet zero_head_model(const ModelConfig& mc) {
  ParamSet z = build_vit(mc, 5);
  for (double& v : z.at("head.w").raw_data()) v = 0.0;
  for (double& v : z.at("head.b").raw_data()) v = 0.0;
  return z;
}

}  // namespace

TEST_CASE("metrics rollup: perfect and constant classifiers land exactly") {
  Memorized m;
  std::vector<TaskEval> tasks{{m.setup, &m.ds, &m.model}};
  std::vector<ClientState> clients{make_client(0, 0, {}, iota_indices(0, 6)),
                                   make_client(1, 0, {}, iota_indices(6, 6))};

  MetricsRow row = evaluate_metrics(3, tasks, clients, {}, 4);
  CHECK(row.round == 3);
  CHECK(row.global_acc == 1.0);
  CHECK(row.mean_local_acc == 1.0);
  REQUIRE(row.per_task_acc.size() == 1);
  CHECK(row.per_task_acc[0] == 1.0);
  CHECK(row.loss >= 0.0);
  CHECK(row.loss < 0.1);

  // Same clients scored under explicit per-client models (both the global).
  MetricsRow local = evaluate_metrics(3, tasks, clients, {&m.model, &m.model}, 4);
  CHECK(local.global_acc == 1.0);
  CHECK(local.mean_local_acc == 1.0);

  ParamSet z = zero_head_model(m.mc);
  std::vector<TaskEval> constant{{m.setup, &m.ds, &z}};
  std::vector<ClientState> both{make_client(0, 0, {}, iota_indices(0, 12)),
                                make_client(1, 0, {}, iota_indices(0, 12))};
  MetricsRow flat = evaluate_metrics(0, constant, both, {}, 5);
  CHECK(flat.global_acc == 0.25);
  CHECK(flat.mean_local_acc == 0.25);
  CHECK(flat.per_task_acc[0] == 0.25);
  CHECK(flat.loss == doctest::Approx(std::log(4.0)).epsilon(1e-5));
}

TEST_CASE("metrics rollup: local mean equals the per-client recomputation") {
  Memorized m;
  ParamSet z = zero_head_model(m.mc);
  std::vector<TaskEval> tasks{{m.setup, &m.ds, &m.model}};
  std::vector<ClientState> clients{make_client(0, 0, {}, iota_indices(0, 6)),
                                   make_client(1, 0, {}, iota_indices(6, 6))};

  MetricsRow row = evaluate_metrics(0, tasks, clients, {&m.model, &z}, 4);

  double a0 = evaluate(m.setup, m.model, m.ds, clients[0].test_indices, 4).accuracy;
  double a1 = evaluate(m.setup, z, m.ds, clients[1].test_indices, 4).accuracy;
  CHECK(row.mean_local_acc == (a0 + a1) / 2.0);
  // The global column ignores client models: it scores the task model.
  CHECK(row.global_acc == 1.0);
}

TEST_CASE("metrics rollup: global accuracy pools tasks by test-sample count") {
  Memorized m;
  ParamSet z = zero_head_model(m.mc);
  std::vector<TaskEval> tasks{{m.setup, &m.ds, &m.model}, {m.setup, &m.ds, &z}};
  std::vector<ClientState> clients{make_client(0, 0, {}, iota_indices(0, 6)),
                                   make_client(1, 0, {}, iota_indices(6, 6)),
                                   make_client(2, 1, {}, iota_indices(0, 12))};

  MetricsRow row = evaluate_metrics(0, tasks, clients, {}, 6);
  REQUIRE(row.per_task_acc.size() == 2);
  CHECK(row.per_task_acc[0] == 1.0);
  CHECK(row.per_task_acc[1] == 0.25);
  // 12 perfect + 12 quarter-right samples pool to (12 + 3) / 24.
  CHECK(row.global_acc == 0.625);
}

TEST_CASE("metrics rollup rejects malformed inputs") {
  Memorized m;
  std::vector<TaskEval> tasks{{m.setup, &m.ds, &m.model}};
  std::vector<ClientState> ok{make_client(0, 0, {}, iota_indices(0, 6))};

  std::vector<ClientState> empty_test{make_client(0, 0, iota_indices(0, 6), {})};
  CHECK_THROWS_AS(evaluate_metrics(0, tasks, empty_test, {}, 4), std::invalid_argument);

  std::vector<ClientState> bad_task{make_client(0, 7, {}, iota_indices(0, 6))};
  CHECK_THROWS_AS(evaluate_metrics(0, tasks, bad_task, {}, 4), std::invalid_argument);

  CHECK_THROWS_AS(evaluate_metrics(0, {}, ok, {}, 4), std::invalid_argument);
  CHECK_THROWS_AS(evaluate_metrics(0, tasks, {}, {}, 4), std::invalid_argument);
  CHECK_THROWS_AS(evaluate_metrics(0, tasks, ok, {&m.model, &m.model}, 4),
                  std::invalid_argument);

  std::vector<TaskEval> no_model{{m.setup, &m.ds, nullptr}};
  CHECK_THROWS_AS(evaluate_metrics(0, no_model, ok, {}, 4), std::invalid_argument);
}

// ---- serialization ---------------------------------------------------------------

TEST_CASE("round CSV mirrors the traces, with evaluation gaps left blank") {
  MiniFed fed;
  RunResult rr = run_fedyolo(fed.tasks(), fed.clients, fed.cfg);
  REQUIRE(!rr.traces.empty());

  const std::string path = tmp_path("fedsim_round_test.csv");
  write_round_csv(rr, path);
  std::vector<std::string> lines = read_lines(path);

  REQUIRE(lines.size() == rr.traces.size() + 1);
  CHECK(lines[0] == "round,task,clients,loss,acc,params_tx");
  for (size_t i = 0; i < rr.traces.size(); ++i) {
    const RoundTrace& t = rr.traces[i];
    std::vector<std::string> f = split(lines[i + 1], ',');
    REQUIRE(f.size() == 6);
    CHECK(f[0] == std::to_string(t.round));
    CHECK(f[1] == std::to_string(t.task_id));
    std::vector<std::string> ids = split(f[2], ';');
    REQUIRE(ids.size() == t.sampled_clients.size());
    for (size_t k = 0; k < ids.size(); ++k) {
      CHECK(ids[k] == std::to_string(t.sampled_clients[k]));
    }
    CHECK(std::stod(f[3]) == t.train_loss);
    if (t.eval_acc) {
      CHECK(std::stod(f[4]) == *t.eval_acc);
    } else {
      CHECK(f[4].empty());
    }
    CHECK(f[5] == std::to_string(t.params_up));  // upload convention
  }
  // eval_every=2 over two rounds: round 0 blank, round 1 evaluated.
  bool saw_blank = false, saw_value = false;
  for (const auto& t : rr.traces) (t.eval_acc ? saw_value : saw_blank) = true;
  CHECK(saw_blank);
  CHECK(saw_value);
  std::filesystem::remove(path);
}

TEST_CASE("comm CSV lists every ledger record verbatim") {
  MiniFed fed;
  RunResult rr = run_fedyolo(fed.tasks(), fed.clients, fed.cfg);
  CommLedger ledger = ledger_from_run(rr, fed.clients, fed.setups());

  const std::string path = tmp_path("fedsim_comm_test.csv");
  write_comm_csv(ledger, path);
  std::vector<std::string> lines = read_lines(path);

  REQUIRE(lines.size() == ledger.records().size() + 1);
  CHECK(lines[0] == "round,client,task,dir,params,bytes");
  for (size_t i = 0; i < ledger.records().size(); ++i) {
    const CommRecord& r = ledger.records()[i];
    std::vector<std::string> f = split(lines[i + 1], ',');
    REQUIRE(f.size() == 6);
    CHECK(f[0] == std::to_string(r.round));
    CHECK(f[1] == std::to_string(r.client_id));
    CHECK(f[2] == std::to_string(r.task_id));
    CHECK(f[3] == (r.dir == Direction::up ? "up" : "down"));
    CHECK(f[4] == std::to_string(r.param_count));
    CHECK(f[5] == std::to_string(r.bytes));
  }
  std::filesystem::remove(path);
}

TEST_CASE("metrics CSV round-trips rows including the per-task column") {
  std::vector<MetricsRow> rows(2);
  rows[0].round = 0;
  rows[0].global_acc = 0.5;
  rows[0].mean_local_acc = 0.25;
  rows[0].per_task_acc = {0.5, 0.125};
  rows[0].loss = 1.0;
  rows[1].round = 10;
  rows[1].global_acc = 0.975;
  rows[1].mean_local_acc = 1.0;
  rows[1].per_task_acc = {0.975};
  rows[1].loss = 0.0625;

  const std::string path = tmp_path("fedsim_metrics_test.csv");
  write_metrics_csv(rows, path);
  std::vector<std::string> lines = read_lines(path);

  REQUIRE(lines.size() == 3);
  CHECK(lines[0] == "round,global_acc,mean_local_acc,per_task_acc,loss");
  CHECK(lines[1] == "0,0.5,0.25,0.5;0.125,1");
  CHECK(lines[2] == "10,0.97499999999999998,1,0.97499999999999998,0.0625");

  // Every double survives the %.17g round-trip exactly.
  std::vector<std::string> f = split(lines[2], ',');
  CHECK(std::stod(f[1]) == 0.975);
  CHECK(std::stod(f[4]) == 0.0625);
  std::filesystem::remove(path);
}

TEST_CASE("csv writers refuse an unwritable path") {
  std::vector<MetricsRow> rows(1);
  CHECK_THROWS_AS(write_metrics_csv(rows, "/nonexistent-dir/x.csv"), std::runtime_error);
}

TEST_CASE("run JSON carries traces, evals, and digests when recorded") {
  MiniFed fed;
  RunResult rr = run_fedyolo(fed.tasks(), fed.clients, fed.cfg);
  std::string text = run_to_json(rr);

  // Structural spot checks against the source structs, via a fresh parse.
  auto j = nlohmann::json::parse(text);
  REQUIRE(j["traces"].size() == rr.traces.size());
  const RoundTrace& t0 = rr.traces[0];
  CHECK(j["traces"][0]["round"] == t0.round);
  CHECK(j["traces"][0]["task"] == t0.task_id);
  CHECK(j["traces"][0]["params_up"] == t0.params_up);
  CHECK(j["traces"][0]["train_loss"] == t0.train_loss);
  REQUIRE(j["traces"][0]["clients"].size() == t0.sampled_clients.size());
  CHECK(j["traces"][0].contains("eval_acc") == t0.eval_acc.has_value());
  REQUIRE(j["client_eval"].size() == fed.clients.size());
  CHECK(j["client_eval"][0]["accuracy"] == rr.client_eval[0].accuracy);
  CHECK(j["backbone_scalars_down"] == rr.backbone_scalars_down);
  CHECK(!j.contains("round_digests"));

  FedConfig with_digests = fed.cfg;
  with_digests.round_digests = true;
  RunResult rr2 = run_fedyolo(fed.tasks(), fed.clients, with_digests);
  auto j2 = nlohmann::json::parse(run_to_json(rr2));
  REQUIRE(j2.contains("round_digests"));
  CHECK(j2["round_digests"].size() == static_cast<size_t>(with_digests.rounds));
}
