#include "fedsim/experiment.hpp"

#include "fedsim/rng.hpp"
#include "fedsim/sha256.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;
using nlohmann::json;

namespace fedsim {

namespace {

// Seed-stream tags for everything the experiment layer derives itself.
constexpr uint64_t kTagData = 0x65646174;          // "edat"
constexpr uint64_t kTagPartition = 0x65707274;     // "eprt"
constexpr uint64_t kTagSplit = 0x6573706c;         // "espl"
constexpr uint64_t kTagBackbone = 0x6562616b;      // "ebak"
constexpr uint64_t kTagPretrainData = 0x65707264;  // "eprd"
constexpr uint64_t kTagPretrainTune = 0x65707475;  // "eptu"
constexpr uint64_t kTagAttach = 0x65617474;        // "eatt"
constexpr uint64_t kTagFullModel = 0x65666d64;     // "efmd"

// ---- aggregated-error JSON reading ------------------------------------------

struct Reader {
  const json& obj;
  std::string path;  // "" or "fed." / "tasks[0]." style prefix
  std::vector<std::string>& errors;
  std::set<std::string> known;

  void fail(const char* key, const std::string& why) {
    errors.push_back(path + key + ": " + why);
  }

  const json* field(const char* key) {
    known.insert(key);
    auto it = obj.find(key);
    return it == obj.end() ? nullptr : &*it;
  }

  void i32(const char* key, int& out) {
    if (const json* v = field(key)) {
      if (v->is_number_integer()) out = v->get<int>();
      else fail(key, "expected an integer");
    }
  }

  void u64(const char* key, uint64_t& out) {
    if (const json* v = field(key)) {
      if (v->is_number_unsigned() || (v->is_number_integer() && v->get<int64_t>() >= 0)) {
        out = v->get<uint64_t>();
      } else {
        fail(key, "expected a non-negative integer");
      }
    }
  }

  void f64(const char* key, double& out) {
    if (const json* v = field(key)) {
      if (v->is_number()) out = v->get<double>();
      else fail(key, "expected a number");
    }
  }

  void str(const char* key, std::string& out) {
    if (const json* v = field(key)) {
      if (v->is_string()) out = v->get<std::string>();
      else fail(key, "expected a string");
    }
  }

  void boolean(const char* key, bool& out) {
    if (const json* v = field(key)) {
      if (v->is_boolean()) out = v->get<bool>();
      else fail(key, "expected true or false");
    }
  }

  const json* object(const char* key) {
    if (const json* v = field(key)) {
      if (v->is_object()) return v;
      fail(key, "expected an object");
    }
    return nullptr;
  }

  // Unknown keys are reported rather than ignored: a silently dropped typo
  // would run a different experiment than the one written down.
  void finish() {
    for (const auto& item : obj.items()) {
      if (!known.count(item.key())) errors.push_back(path + item.key() + ": unknown field");
    }
  }
};

void read_module(const json& j, std::vector<std::string>& errors, ModuleSpec& spec) {
  Reader r{j, "module.", errors, {}};
  std::string kind;
  r.str("kind", kind);
  if (!kind.empty()) {
    try {
      spec.kind = kind_from_name(kind);
    } catch (const std::exception&) {
      r.fail("kind", "unknown module kind '" + kind + "'");
    }
  }
  r.i32("bottleneck_dim", spec.bottleneck_dim);
  r.i32("lora_rank", spec.lora_rank);
  r.i32("prompt_len", spec.prompt_len);
  r.finish();
}

void read_fed(const json& j, std::vector<std::string>& errors, FedConfig& fed) {
  Reader r{j, "fed.", errors, {}};
  r.i32("rounds", fed.rounds);
  r.i32("clients_per_round", fed.clients_per_round);
  r.i32("local_epochs", fed.local_epochs);
  r.i32("batch_size", fed.batch_size);
  r.f64("lr_peak", fed.lr_peak);
  r.f64("warmup_fraction", fed.warmup_fraction);
  r.f64("momentum", fed.momentum);
  r.f64("weight_decay", fed.weight_decay);
  r.f64("prox_mu", fed.prox_mu);
  r.i32("personal_epochs", fed.personal_epochs);
  r.i32("eval_every", fed.eval_every);
  r.boolean("sparse_wire", fed.sparse_wire);
  r.boolean("round_digests", fed.round_digests);
  r.finish();
}

void read_task(const json& j, size_t index, std::vector<std::string>& errors, TaskConfig& t) {
  Reader r{j, "tasks[" + std::to_string(index) + "].", errors, {}};
  r.i32("classes", t.classes);
  r.i32("samples_per_class", t.samples_per_class);
  r.f64("noise", t.noise);
  r.i32("clients", t.clients);
  r.i32("classes_per_client", t.classes_per_client);
  r.i32("samples_per_client", t.samples_per_client);
  r.f64("train_fraction", t.train_fraction);
  r.u64("data_seed", t.data_seed);
  r.finish();
}

void read_pretrain(const json& j, std::vector<std::string>& errors, PretrainConfig& p) {
  Reader r{j, "pretrain.", errors, {}};
  p.enabled = true;  // the block's presence opts in unless it says otherwise
  r.boolean("enabled", p.enabled);
  r.i32("classes", p.classes);
  r.i32("samples_per_class", p.samples_per_class);
  r.f64("noise", p.noise);
  r.i32("epochs", p.epochs);
  r.i32("batch_size", p.batch_size);
  r.f64("lr_peak", p.lr_peak);
  r.u64("data_seed", p.data_seed);
  r.finish();
}

std::string group_digits(int64_t n) {
  std::string raw = std::to_string(n);
  std::string out;
  int run = 0;
  for (auto it = raw.rbegin(); it != raw.rend(); ++it) {
    if (run == 3 && std::isdigit(static_cast<unsigned char>(*it))) {
      out += ',';
      run = 0;
    }
    out += *it;
    ++run;
  }
  std::reverse(out.begin(), out.end());
  return out;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

std::string exp_scheme_name(ExpScheme s) {
  switch (s) {
    case ExpScheme::local_only: return "local_only";
    case ExpScheme::fedavg: return "fedavg";
    case ExpScheme::fedavg_local: return "fedavg_local";
    case ExpScheme::fedprox: return "fedprox";
    case ExpScheme::fedyolo: return "fedyolo";
  }
  throw std::logic_error("unreachable scheme");
}

ExpScheme exp_scheme_from_name(const std::string& name) {
  if (name == "local_only") return ExpScheme::local_only;
  if (name == "fedavg") return ExpScheme::fedavg;
  if (name == "fedavg_local") return ExpScheme::fedavg_local;
  if (name == "fedprox") return ExpScheme::fedprox;
  if (name == "fedyolo") return ExpScheme::fedyolo;
  throw std::invalid_argument("unknown scheme '" + name + "'");
}

ExperimentConfig parse_experiment(const std::string& text, std::vector<std::string>& errors) {
  ExperimentConfig cfg;
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    errors.push_back(std::string("config: not parseable JSON (") + e.what() + ")");
    return cfg;
  }
  if (!j.is_object()) {
    errors.push_back("config: the top level must be an object");
    return cfg;
  }

  Reader r{j, "", errors, {}};
  r.str("preset", cfg.preset_name);

  std::string scheme;
  r.str("scheme", scheme);
  if (scheme.empty()) {
    errors.push_back("scheme: required");
  } else {
    try {
      cfg.scheme = exp_scheme_from_name(scheme);
    } catch (const std::exception&) {
      errors.push_back("scheme: unknown scheme '" + scheme + "'");
    }
  }

  std::string mode;
  r.str("update_mode", mode);
  if (!mode.empty()) {
    try {
      cfg.update_mode = update_mode_from_name(mode);
    } catch (const std::exception&) {
      errors.push_back("update_mode: unknown mode '" + mode + "'");
    }
  }

  if (const json* m = r.object("module")) read_module(*m, errors, cfg.module);
  if (const json* f = r.object("fed")) read_fed(*f, errors, cfg.fed);

  if (const json* t = r.field("tasks")) {
    if (!t->is_array()) {
      errors.push_back("tasks: expected an array");
    } else {
      for (size_t i = 0; i < t->size(); ++i) {
        TaskConfig task;
        if ((*t)[i].is_object()) {
          read_task((*t)[i], i, errors, task);
        } else {
          errors.push_back("tasks[" + std::to_string(i) + "]: expected an object");
        }
        cfg.tasks.push_back(task);
      }
    }
  }

  if (const json* p = r.object("pretrain")) read_pretrain(*p, errors, cfg.pretrain);

  r.str("out", cfg.out_dir);
  r.u64("seed", cfg.seed);
  r.i32("threads", cfg.fed.threads);
  r.finish();
  return cfg;
}

std::vector<std::string> validate_experiment(ExperimentConfig& cfg) {
  std::vector<std::string> errs;
  auto err = [&](std::string s) { errs.push_back(std::move(s)); };

  ModelConfig mc;
  bool preset_ok = true;
  try {
    mc = preset(cfg.preset_name);
  } catch (const std::exception&) {
    preset_ok = false;
    err("preset: unknown preset '" + cfg.preset_name + "'");
  }

  if (cfg.update_mode == UpdateMode::head_only) cfg.module.kind = ModuleKind::head_only;
  if (cfg.update_mode == UpdateMode::modular && cfg.module.kind == ModuleKind::head_only) {
    err("update_mode: a head_only module stack needs update_mode head_only");
  }
  try {
    validate_spec(cfg.module);
  } catch (const std::exception& e) {
    err(std::string("module: ") + e.what());
  }

  FedConfig& f = cfg.fed;
  if (f.rounds <= 0) err("fed.rounds: must be positive");
  if (f.clients_per_round < 0) err("fed.clients_per_round: must be >= 0");
  if (f.local_epochs <= 0) err("fed.local_epochs: must be positive");
  if (f.batch_size <= 0) err("fed.batch_size: must be positive");
  if (!(f.lr_peak > 0.0)) err("fed.lr_peak: must be positive");
  if (!(f.warmup_fraction >= 0.0 && f.warmup_fraction < 1.0)) {
    err("fed.warmup_fraction: must lie in [0, 1)");
  }
  if (!(f.momentum >= 0.0 && f.momentum < 1.0)) err("fed.momentum: must lie in [0, 1)");
  if (f.weight_decay < 0.0) err("fed.weight_decay: must be >= 0");
  if (f.prox_mu < 0.0) err("fed.prox_mu: must be >= 0");
  if (f.personal_epochs < 0) err("fed.personal_epochs: must be >= 0");
  if (f.eval_every < 0) err("fed.eval_every: must be >= 0");
  if (f.threads < 0) err("threads: must be >= 0");
  if (cfg.scheme == ExpScheme::fedprox && !(f.prox_mu > 0.0)) {
    err("fed.prox_mu: fedprox needs a positive proximal weight");
  }
  if (f.sparse_wire && cfg.update_mode == UpdateMode::full) {
    err("fed.sparse_wire: the module-shaped wire format cannot carry full updates");
  }

  if (cfg.tasks.empty()) cfg.tasks.push_back(TaskConfig{});
  if (cfg.tasks.size() > 1 && cfg.scheme == ExpScheme::local_only) {
    err("scheme: local_only cannot span multiple tasks");
  }

  int64_t population = 0;
  for (size_t k = 0; k < cfg.tasks.size(); ++k) {
    TaskConfig& t = cfg.tasks[k];
    const std::string p = "tasks[" + std::to_string(k) + "].";
    if (t.classes == 0 && preset_ok) t.classes = mc.num_classes;
    if (t.classes < 2) err(p + "classes: need at least two classes");
    if (t.samples_per_class <= 0) err(p + "samples_per_class: must be positive");
    if (t.noise < 0.0) err(p + "noise: must be >= 0");
    if (t.clients <= 0) err(p + "clients: must be positive");
    if (t.classes_per_client < 0 || t.classes_per_client > t.classes) {
      err(p + "classes_per_client: must lie in [0, classes]");
    }
    if (!(t.train_fraction > 0.0 && t.train_fraction < 1.0)) {
      err(p + "train_fraction: must lie in (0, 1)");
    }
    if (t.samples_per_client < 0) err(p + "samples_per_client: must be >= 0");

    if (t.classes >= 2 && t.samples_per_class > 0 && t.clients > 0 && t.samples_per_client >= 0) {
      const int64_t total = static_cast<int64_t>(t.classes) * t.samples_per_class;
      if (t.samples_per_client == 0) {
        t.samples_per_client = static_cast<int>(total / t.clients);
      }
      if (t.samples_per_client <= 0) {
        err(p + "clients: more clients than samples");
      } else if (static_cast<int64_t>(t.samples_per_client) * t.clients > total) {
        err(p + "samples_per_client: demands more samples than the task holds");
      }
      if (t.classes_per_client == 0) t.classes_per_client = t.classes;
    }
    if (t.data_seed == 0) t.data_seed = mix_seed({cfg.seed, kTagData, k});
    population += t.clients;
  }
  if (f.clients_per_round > population) {
    err("fed.clients_per_round: larger than the client population");
  }

  if (cfg.pretrain.enabled) {
    PretrainConfig& pt = cfg.pretrain;
    if (pt.classes < 2) err("pretrain.classes: need at least two classes");
    if (pt.samples_per_class <= 0) err("pretrain.samples_per_class: must be positive");
    if (pt.noise < 0.0) err("pretrain.noise: must be >= 0");
    if (pt.epochs <= 0) err("pretrain.epochs: must be positive");
    if (pt.batch_size <= 0) err("pretrain.batch_size: must be positive");
    if (!(pt.lr_peak > 0.0)) err("pretrain.lr_peak: must be positive");
    if (pt.data_seed == 0) pt.data_seed = mix_seed({cfg.seed, kTagPretrainData});
  }

  if (cfg.out_dir.empty()) err("out: required");

  cfg.fed.seed = cfg.seed;
  cfg.fed.update_mode = cfg.update_mode;
  return errs;
}

std::string experiment_to_json(const ExperimentConfig& cfg) {
  json j;
  j["preset"] = cfg.preset_name;
  j["scheme"] = exp_scheme_name(cfg.scheme);
  j["update_mode"] = update_mode_name(cfg.update_mode);
  j["module"] = {{"kind", kind_name(cfg.module.kind)},
                 {"bottleneck_dim", cfg.module.bottleneck_dim},
                 {"lora_rank", cfg.module.lora_rank},
                 {"prompt_len", cfg.module.prompt_len}};
  j["fed"] = {{"rounds", cfg.fed.rounds},
              {"clients_per_round", cfg.fed.clients_per_round},
              {"local_epochs", cfg.fed.local_epochs},
              {"batch_size", cfg.fed.batch_size},
              {"lr_peak", cfg.fed.lr_peak},
              {"warmup_fraction", cfg.fed.warmup_fraction},
              {"momentum", cfg.fed.momentum},
              {"weight_decay", cfg.fed.weight_decay},
              {"prox_mu", cfg.fed.prox_mu},
              {"personal_epochs", cfg.fed.personal_epochs},
              {"eval_every", cfg.fed.eval_every},
              {"sparse_wire", cfg.fed.sparse_wire},
              {"round_digests", cfg.fed.round_digests}};
  j["tasks"] = json::array();
  for (const TaskConfig& t : cfg.tasks) {
    j["tasks"].push_back({{"classes", t.classes},
                          {"samples_per_class", t.samples_per_class},
                          {"noise", t.noise},
                          {"clients", t.clients},
                          {"classes_per_client", t.classes_per_client},
                          {"samples_per_client", t.samples_per_client},
                          {"train_fraction", t.train_fraction},
                          {"data_seed", t.data_seed}});
  }
  j["pretrain"] = {{"enabled", cfg.pretrain.enabled},
                   {"classes", cfg.pretrain.classes},
                   {"samples_per_class", cfg.pretrain.samples_per_class},
                   {"noise", cfg.pretrain.noise},
                   {"epochs", cfg.pretrain.epochs},
                   {"batch_size", cfg.pretrain.batch_size},
                   {"lr_peak", cfg.pretrain.lr_peak},
                   {"data_seed", cfg.pretrain.data_seed}};
  j["out"] = cfg.out_dir;
  j["seed"] = cfg.seed;
  j["threads"] = cfg.fed.threads;
  return j.dump(2);
}

std::string experiment_fingerprint(const ExperimentConfig& cfg) {
  json j = json::parse(experiment_to_json(cfg));
  j["out"] = "";    // output location and parallelism never change results,
  j["threads"] = 0;  // so they stay outside the content hash
  return sha256_hex(j.dump());
}

// ---- world construction ------------------------------------------------------

namespace {

struct World {
  std::vector<Dataset> data;  // one per fed task (a union merge leaves one)
  std::vector<TaskSetup> setups;
  std::vector<FedTask> tasks;
  std::vector<ClientState> clients;
};

// Full model for the backbone: fresh, or centrally fitted on the held-out
// upstream task when pretraining is enabled.
ParamSet backbone_model(const ExperimentConfig& cfg, const ModelConfig& base) {
  ModelConfig mc = base;
  mc.num_classes = cfg.pretrain.classes;
  ParamSet model = build_vit(mc, mix_seed({cfg.seed, kTagBackbone}));
  if (!cfg.pretrain.enabled) return model;

  Dataset upstream = synth_task(cfg.pretrain.classes, cfg.pretrain.samples_per_class,
                                mc.image_size, cfg.pretrain.noise, cfg.pretrain.data_seed);
  FedConfig tune;
  tune.rounds = 1;
  tune.local_epochs = cfg.pretrain.epochs;
  tune.batch_size = cfg.pretrain.batch_size;
  tune.lr_peak = cfg.pretrain.lr_peak;
  tune.warmup_fraction = 0.1;
  tune.momentum = 0.9;
  tune.seed = mix_seed({cfg.seed, kTagPretrainTune});
  TaskSetup setup{mc, UpdateMode::full, ModuleSpec{}, nullptr};
  std::vector<size_t> all(static_cast<size_t>(upstream.size()));
  std::iota(all.begin(), all.end(), size_t{0});
  ClientState trainer{0, 0, std::move(all), {}};
  return local_tuning(trainer, model, upstream, setup, tune, 0);
}

void copy_values(const Tensor& src, Tensor& dst) {
  auto s = src.data();
  auto d = dst.raw_data();
  if (s.size() != d.size()) throw std::logic_error("pretrained entry shape mismatch");
  std::copy(s.begin(), s.end(), d.begin());
}

World build_world(const ExperimentConfig& cfg) {
  World w;
  const ModelConfig base = preset(cfg.preset_name);
  const size_t num_tasks = cfg.tasks.size();

  std::vector<Dataset> per_task(num_tasks);
  std::vector<std::vector<ClientState>> task_clients(num_tasks);
  int next_id = 0;
  for (size_t k = 0; k < num_tasks; ++k) {
    const TaskConfig& t = cfg.tasks[k];
    per_task[k] = synth_task(t.classes, t.samples_per_class, base.image_size, t.noise,
                             t.data_seed);
    per_task[k].task_id = static_cast<int>(k);
    per_task[k].name = "task" + std::to_string(k);
    PartitionSpec part =
        partition_by_classes(per_task[k], t.clients, t.classes_per_client,
                             t.samples_per_client, mix_seed({cfg.seed, kTagPartition, k}));
    for (int i = 0; i < t.clients; ++i) {
      SplitResult split =
          split_local(per_task[k], part.client_indices[static_cast<size_t>(i)],
                      t.train_fraction, mix_seed({cfg.seed, kTagSplit, k, uint64_t(i)}));
      task_clients[k].push_back(ClientState{next_id++, static_cast<int>(k),
                                            std::move(split.train), std::move(split.test)});
    }
  }

  // Every non-fedyolo multitask run collapses to the naive baseline: one
  // model over the union label space, every client pointed at the merged set.
  const bool merge = num_tasks > 1 && cfg.scheme != ExpScheme::fedyolo;
  if (merge) {
    std::vector<const Dataset*> parts;
    for (const Dataset& d : per_task) parts.push_back(&d);
    UnionTask u = concat_tasks(parts);
    for (size_t k = 0; k < num_tasks; ++k) {
      for (ClientState& c : task_clients[k]) {
        for (size_t& idx : c.train_indices) idx += u.index_offsets[k];
        for (size_t& idx : c.test_indices) idx += u.index_offsets[k];
        c.task_id = 0;
      }
    }
    u.data.name = "union";
    w.data.push_back(std::move(u.data));
  } else {
    w.data = std::move(per_task);
  }
  for (auto& group : task_clients) {
    for (ClientState& c : group) w.clients.push_back(std::move(c));
  }

  if (cfg.update_mode != UpdateMode::full) {
    auto backbone = freeze_backbone(backbone_model(cfg, base));
    for (size_t k = 0; k < w.data.size(); ++k) {
      ModelConfig mc = base;
      mc.num_classes = w.data[k].num_classes;
      AdaptedModel adapted = attach(backbone, mc, cfg.module, mix_seed({cfg.seed, kTagAttach, k}));
      w.setups.push_back(TaskSetup{mc, cfg.update_mode, cfg.module, backbone});
      w.tasks.push_back(FedTask{static_cast<int>(k), &w.data[k], w.setups[k],
                                std::move(adapted.module_params)});
    }
  } else {
    ParamSet pretrained;
    if (cfg.pretrain.enabled) pretrained = backbone_model(cfg, base);
    for (size_t k = 0; k < w.data.size(); ++k) {
      ModelConfig mc = base;
      mc.num_classes = w.data[k].num_classes;
      ParamSet model = build_vit(mc, mix_seed({cfg.seed, kTagFullModel, k}));
      if (cfg.pretrain.enabled) {
        // Pretrained body, fresh task-sized head.
        for (const auto& name : model.names()) {
          if (name != "head.w" && name != "head.b") copy_values(pretrained.at(name), model.at(name));
        }
      }
      w.setups.push_back(TaskSetup{mc, UpdateMode::full, cfg.module, nullptr});
      w.tasks.push_back(FedTask{static_cast<int>(k), &w.data[k], w.setups[k], std::move(model)});
    }
  }
  return w;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace

RunArtifacts run_experiment(const ExperimentConfig& cfg_in) {
  ExperimentConfig cfg = cfg_in;
  std::vector<std::string> errs = validate_experiment(cfg);
  if (!errs.empty()) {
    std::string all = "invalid experiment config:";
    for (const std::string& e : errs) all += "\n  " + e;
    throw std::invalid_argument(all);
  }

  const auto t0 = std::chrono::steady_clock::now();
  World w = build_world(cfg);
  const std::vector<TaskSetup> setups = w.setups;

  RunResult rr;
  switch (cfg.scheme) {
    case ExpScheme::fedyolo:
      rr = run_fedyolo(std::move(w.tasks), w.clients, cfg.fed);
      break;
    case ExpScheme::local_only:
      rr = run_scheme(Scheme::local_only, std::move(w.tasks[0]), w.clients, cfg.fed);
      break;
    case ExpScheme::fedavg:
    case ExpScheme::fedprox:  // the proximal weight rides in fed.prox_mu
      rr = run_scheme(Scheme::fedavg, std::move(w.tasks[0]), w.clients, cfg.fed);
      break;
    case ExpScheme::fedavg_local:
      rr = run_scheme(Scheme::fedavg_local, std::move(w.tasks[0]), w.clients, cfg.fed);
      break;
  }

  RunArtifacts art;
  art.ledger = ledger_from_run(rr, w.clients, setups);
  for (const ParamSet& p : rr.task_params) {
    art.params_per_client.push_back(p.scalar_count(true));
  }

  std::vector<TaskEval> evals;
  for (size_t k = 0; k < rr.task_params.size(); ++k) {
    evals.push_back(TaskEval{setups[k], &w.data[k], &rr.task_params[k]});
  }
  std::vector<const ParamSet*> client_models;
  for (const ParamSet& p : rr.client_params) client_models.push_back(&p);
  art.final_metrics =
      evaluate_metrics(cfg.fed.rounds, evals, w.clients, client_models, cfg.fed.batch_size);

  if (cfg.scheme == ExpScheme::fedavg_local && !rr.client_params.empty()) {
    std::vector<size_t> pooled;
    for (const ClientState& c : w.clients) {
      pooled.insert(pooled.end(), c.test_indices.begin(), c.test_indices.end());
    }
    art.acc_before_personalization =
        evaluate(setups[0], rr.task_params[0], w.data[0], pooled, cfg.fed.batch_size).accuracy;
    double after = 0.0;
    for (const ParamSet& p : rr.client_params) {
      after += evaluate(setups[0], p, w.data[0], pooled, cfg.fed.batch_size).accuracy;
    }
    art.acc_after_personalization = after / static_cast<double>(rr.client_params.size());
    if (art.acc_before_personalization > 0.0) {
      art.forgetting =
          forgetting_ratio(art.acc_before_personalization, art.acc_after_personalization);
      art.has_forgetting = true;
    }
  }

  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  auto emit = [&](const std::string& name) {
    art.files.push_back((out / name).string());
    return art.files.back();
  };
  write_round_csv(rr, emit("rounds.csv"));
  write_comm_csv(art.ledger, emit("comm.csv"));
  write_metrics_csv({art.final_metrics}, emit("metrics.csv"));
  for (size_t k = 0; k < rr.task_params.size(); ++k) {
    const std::string prefix = (out / ("task" + std::to_string(k))).string();
    save_checkpoint(rr.task_params[k], prefix);
    art.files.push_back(prefix + ".json");
    art.files.push_back(prefix + ".bin");
  }
  for (size_t i = 0; i < rr.client_params.size(); ++i) {
    const std::string prefix = (out / ("client" + std::to_string(i))).string();
    save_checkpoint(rr.client_params[i], prefix);
    art.files.push_back(prefix + ".json");
    art.files.push_back(prefix + ".bin");
  }

  json result;
  result["schema_version"] = kResultSchemaVersion;
  result["config"] = json::parse(experiment_to_json(cfg));
  result["config_hash"] = experiment_fingerprint(cfg);
  result["params_per_client"] = art.params_per_client;
  result["backbone_scalars_down"] = rr.backbone_scalars_down;
  result["comm"] = {{"up_params", art.ledger.total_params(Direction::up)},
                    {"down_params", art.ledger.total_params(Direction::down)},
                    {"up_bytes", art.ledger.total_bytes(Direction::up)},
                    {"down_bytes", art.ledger.total_bytes(Direction::down)}};
  result["final"] = {{"round", art.final_metrics.round},
                     {"global_acc", art.final_metrics.global_acc},
                     {"mean_local_acc", art.final_metrics.mean_local_acc},
                     {"per_task_acc", art.final_metrics.per_task_acc},
                     {"loss", art.final_metrics.loss}};
  if (art.has_forgetting) {
    result["forgetting"] = {{"before", art.acc_before_personalization},
                            {"after", art.acc_after_personalization},
                            {"ratio", art.forgetting}};
  }
  result["timing"] = {{"wall_seconds", wall}};
  art.result_json = result.dump(2);
  write_text(emit("result.json"), art.result_json);

  art.result = std::move(rr);
  return art;
}

// ---- reporting ---------------------------------------------------------------

Report report_runs(const std::vector<std::string>& dirs) {
  if (dirs.empty()) throw std::invalid_argument("report: no run directories given");

  Report rep;
  for (const std::string& dir : dirs) {
    const std::string path = (fs::path(dir) / "result.json").string();
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": missing result.json");
    json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ": corrupt result.json (" + e.what() + ")");
    }
    if (!j.contains("schema_version") || !j["schema_version"].is_number_integer()) {
      throw std::runtime_error(path + ": corrupt result.json (no schema_version)");
    }
    const int version = j["schema_version"].get<int>();
    if (version != kResultSchemaVersion) {
      throw std::runtime_error(path + ": schema version " + std::to_string(version) +
                               ", this build reads version " +
                               std::to_string(kResultSchemaVersion));
    }
    ReportRow row;
    row.dir = dir;
    try {
      row.scheme = j.at("config").at("scheme").get<std::string>();
      row.mode = j.at("config").at("update_mode").get<std::string>();
      row.module_kind = j.at("config").at("module").at("kind").get<std::string>();
      row.rounds = j.at("config").at("fed").at("rounds").get<int>();
      row.global_acc = j.at("final").at("global_acc").get<double>();
      row.mean_local_acc = j.at("final").at("mean_local_acc").get<double>();
      row.up_bytes = j.at("comm").at("up_bytes").get<int64_t>();
      if (j.contains("forgetting")) {
        row.forgetting = j.at("forgetting").at("ratio").get<double>();
        row.has_forgetting = true;
      }
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ": corrupt result.json (" + e.what() + ")");
    }
    rep.rows.push_back(std::move(row));
  }

  const ReportRow& base = rep.rows.front();
  const int64_t base_bytes = base.up_bytes;
  const double base_acc = base.global_acc;
  for (size_t i = 0; i < rep.rows.size(); ++i) {
    ReportRow& row = rep.rows[i];
    if (base_bytes > 0 && row.up_bytes > 0) {
      row.comm_x = static_cast<double>(base_bytes) / static_cast<double>(row.up_bytes);
      row.comm_x_valid = true;
      if (i > 0 && row.comm_x >= 100.0) rep.comm_flag = true;
    }
    if (i > 0 && base_acc > 0.0) {
      row.drop_vs_first = hetero_drop(base_acc, row.global_acc);
      row.drop_valid = true;
    }
  }

  // Text table.
  std::ostringstream text;
  std::vector<std::vector<std::string>> grid;
  grid.push_back({"run", "scheme", "mode", "module", "rounds", "global_acc", "local_acc",
                  "forgetting", "up_bytes", "comm_x", "drop_vs_first"});
  for (size_t i = 0; i < rep.rows.size(); ++i) {
    const ReportRow& r = rep.rows[i];
    grid.push_back({r.dir, r.scheme, r.mode, r.module_kind, std::to_string(r.rounds),
                    fmt("%.4f", r.global_acc), fmt("%.4f", r.mean_local_acc),
                    r.has_forgetting ? fmt("%.4f", r.forgetting) : "-",
                    group_digits(r.up_bytes),
                    r.comm_x_valid ? fmt("%.2fx", r.comm_x) : "-",
                    r.drop_valid ? fmt("%.4f", r.drop_vs_first) : "-"});
  }
  std::vector<size_t> width(grid[0].size(), 0);
  for (const auto& row : grid) {
    for (size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  for (const auto& row : grid) {
    for (size_t c = 0; c < row.size(); ++c) {
      text << row[c] << std::string(width[c] - row[c].size() + (c + 1 < row.size() ? 2 : 0), ' ');
    }
    text << '\n';
  }
  if (rep.comm_flag) {
    text << "note: >=100x less upload traffic than '" << base.dir << "'\n";
  }
  rep.text = text.str();

  // CSV twin.
  std::ostringstream csv;
  csv << "run,scheme,mode,module,rounds,global_acc,mean_local_acc,forgetting,up_bytes,"
         "comm_x,drop_vs_first\n";
  for (const ReportRow& r : rep.rows) {
    csv << r.dir << ',' << r.scheme << ',' << r.mode << ',' << r.module_kind << ',' << r.rounds
        << ',' << fmt("%.17g", r.global_acc) << ',' << fmt("%.17g", r.mean_local_acc) << ','
        << (r.has_forgetting ? fmt("%.17g", r.forgetting) : "") << ',' << r.up_bytes << ','
        << (r.comm_x_valid ? fmt("%.17g", r.comm_x) : "") << ','
        << (r.drop_valid ? fmt("%.17g", r.drop_vs_first) : "") << '\n';
  }
  rep.csv = csv.str();
  return rep;
}

// ---- parameter-count table -----------------------------------------------------

CountCell count_cell(const std::string& preset_name, const std::string& method) {
  const ModelConfig cfg = preset(preset_name);
  CountCell cell{preset_name, method, 0, false};
  if (method == "full") {
    cell.count = full_scalar_count(cfg);
  } else if (method == "header") {
    cell.count = header_scalar_count(cfg);
  } else {
    ModuleSpec spec;  // published settings: bottleneck 8, rank 8, prompt 8
    if (method == "adapter") {
      spec.kind = ModuleKind::adapter;
    } else if (method == "lora") {
      spec.kind = ModuleKind::lora;
    } else if (method == "vpt" || method == "prompt") {
      spec.kind = ModuleKind::prompt;
    } else {
      throw std::invalid_argument("unknown method '" + method +
                                  "' (full, header, adapter, lora, vpt)");
    }
    // The one published cell that omits the classifier head.
    cell.head_excluded = preset_name == "vit_l" && spec.kind == ModuleKind::adapter;
    cell.count = module_scalar_count(cfg, spec, !cell.head_excluded);
  }
  return cell;
}

std::vector<CountCell> count_table() {
  std::vector<CountCell> cells;
  for (const char* m : {"full", "header", "adapter", "lora", "vpt"}) {
    for (const char* p : {"vit_t", "vit_s", "vit_b", "vit_l"}) {
      cells.push_back(count_cell(p, m));
    }
  }
  return cells;
}

std::string format_count_table(const std::vector<CountCell>& cells) {
  // Pivot: methods down, presets across, in first-seen order.
  std::vector<std::string> methods, presets;
  for (const CountCell& c : cells) {
    if (std::find(methods.begin(), methods.end(), c.method) == methods.end()) {
      methods.push_back(c.method);
    }
    if (std::find(presets.begin(), presets.end(), c.preset_name) == presets.end()) {
      presets.push_back(c.preset_name);
    }
  }
  std::vector<std::vector<std::string>> grid;
  grid.push_back({"method"});
  for (const std::string& p : presets) grid.back().push_back(p);
  bool any_excluded = false;
  for (const std::string& m : methods) {
    grid.push_back({m});
    for (const std::string& p : presets) {
      auto it = std::find_if(cells.begin(), cells.end(), [&](const CountCell& c) {
        return c.method == m && c.preset_name == p;
      });
      std::string text = it == cells.end() ? "-" : group_digits(it->count);
      if (it != cells.end() && it->head_excluded) {
        text += '*';
        any_excluded = true;
      }
      grid.back().push_back(text);
    }
  }
  std::vector<size_t> width(grid[0].size(), 0);
  for (const auto& row : grid) {
    for (size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  for (const auto& row : grid) {
    for (size_t c = 0; c < row.size(); ++c) {
      out << row[c] << std::string(width[c] - row[c].size() + (c + 1 < row.size() ? 2 : 0), ' ');
    }
    out << '\n';
  }
  if (any_excluded) out << "* classifier head excluded, matching the published figure\n";
  return out.str();
}

}  // namespace fedsim
