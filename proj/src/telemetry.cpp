#include "fedsim/telemetry.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace fedsim {

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_or_throw(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  return out;
}

template <typename T>
std::string join_semicolon(const std::vector<T>& xs, std::string (*fmt)(T)) {
  std::string s;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ';';
    s += fmt(xs[i]);
  }
  return s;
}

}  // namespace

void CommLedger::add(int round, int client_id, int task_id, Direction dir, int64_t param_count) {
  if (param_count < 0) throw std::invalid_argument("param_count must be non-negative");
  records_.push_back({round, client_id, task_id, dir, param_count, 4 * param_count});
  (dir == Direction::up ? up_params_ : down_params_) += param_count;
}

int64_t CommLedger::total_params(Direction dir) const {
  return dir == Direction::up ? up_params_ : down_params_;
}

CommLedger ledger_from_run(const RunResult& rr, const std::vector<ClientState>& clients,
                           const std::vector<TaskSetup>& setups) {
  CommLedger ledger;

  // Round-0 backbone distribution, one download per client of a frozen-backbone
  // task. Skipped entirely for runs that transmitted no backbone (local-only,
  // full-update).
  if (rr.backbone_scalars_down > 0) {
    int64_t accounted = 0;
    for (const auto& c : clients) {
      if (c.task_id < 0 || c.task_id >= static_cast<int>(setups.size())) {
        throw std::invalid_argument("client " + std::to_string(c.client_id) +
                                    " references a task with no setup");
      }
      const TaskSetup& s = setups[static_cast<size_t>(c.task_id)];
      if (s.mode == UpdateMode::full || !s.backbone) continue;
      const int64_t n = s.backbone->scalar_count(false);
      ledger.add(0, c.client_id, c.task_id, Direction::down, n);
      accounted += n;
    }
    if (accounted != rr.backbone_scalars_down) {
      throw std::logic_error("backbone download total does not match the run record");
    }
  }

  for (const auto& trace : rr.traces) {
    if (trace.sampled_clients.empty()) continue;
    if (trace.params_up == 0 && trace.params_down == 0) continue;  // local-only rounds
    const int64_t n = static_cast<int64_t>(trace.sampled_clients.size());
    if (trace.params_up % n != 0 || trace.params_down % n != 0) {
      throw std::logic_error("trace params are not divisible by the contributor count");
    }
    const int64_t up = trace.params_up / n;
    const int64_t down = trace.params_down / n;
    for (int client_id : trace.sampled_clients) {
      ledger.add(trace.round, client_id, trace.task_id, Direction::up, up);
      ledger.add(trace.round, client_id, trace.task_id, Direction::down, down);
    }
  }
  return ledger;
}

int64_t comm_cost(int64_t rounds, int64_t clients_per_round, int64_t params_per_client) {
  if (rounds < 0 || clients_per_round < 0 || params_per_client < 0) {
    throw std::invalid_argument("comm_cost arguments must be non-negative");
  }
  return rounds * clients_per_round * params_per_client;
}

double forgetting_ratio(double acc_global_before, double acc_global_after) {
  if (!(acc_global_before > 0.0)) {
    throw std::invalid_argument("forgetting ratio undefined for non-positive baseline accuracy");
  }
  return (acc_global_before - acc_global_after) / acc_global_before;
}

double hetero_drop(double acc_hom, double acc_het) {
  if (!(acc_hom > 0.0)) {
    throw std::invalid_argument("heterogeneity drop undefined for non-positive baseline accuracy");
  }
  return (acc_hom - acc_het) / acc_hom;
}

ReprSimilarity repr_similarity(const TaskSetup& setup_a, const ParamSet& model_a,
                               const TaskSetup& setup_b, const ParamSet& model_b,
                               const Dataset& ds, const std::vector<size_t>& indices,
                               int batch_size) {
  if (indices.empty()) throw std::invalid_argument("repr_similarity needs a nonempty eval set");
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  NoGradGuard no_grad;
  ReprSimilarity result;
  double sum = 0.0;
  for (size_t pos = 0; pos < indices.size(); pos += static_cast<size_t>(batch_size)) {
    size_t end = std::min(indices.size(), pos + static_cast<size_t>(batch_size));
    std::vector<size_t> batch(indices.begin() + static_cast<int64_t>(pos),
                              indices.begin() + static_cast<int64_t>(end));
    auto [images, labels] = gather(ds, batch);
    (void)labels;
    Tensor ra = task_forward(setup_a, model_a, images).cls_repr;
    Tensor rb = task_forward(setup_b, model_b, images).cls_repr;
    const int64_t dim = ra.dim(1);
    auto da = ra.data();
    auto db = rb.data();
    for (size_t r = 0; r < batch.size(); ++r) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (int64_t j = 0; j < dim; ++j) {
        const double x = da[r * static_cast<size_t>(dim) + static_cast<size_t>(j)];
        const double y = db[r * static_cast<size_t>(dim) + static_cast<size_t>(j)];
        dot += x * y;
        na += x * x;
        nb += y * y;
      }
      if (na == 0.0 || nb == 0.0) {
        ++result.skipped;
        continue;
      }
      sum += dot / (std::sqrt(na) * std::sqrt(nb));
      ++result.used;
    }
  }
  if (result.used == 0) throw std::runtime_error("every representation had zero norm");
  result.mean_cosine = sum / static_cast<double>(result.used);
  return result;
}

MetricsRow evaluate_metrics(int round, const std::vector<TaskEval>& tasks,
                            const std::vector<ClientState>& clients,
                            const std::vector<const ParamSet*>& client_models, int batch_size) {
  if (tasks.empty()) throw std::invalid_argument("no tasks to evaluate");
  if (clients.empty()) throw std::invalid_argument("no clients to evaluate");
  if (!client_models.empty() && client_models.size() != clients.size()) {
    throw std::invalid_argument("client_models must be empty or match the client count");
  }
  for (const auto& t : tasks) {
    if (!t.data || !t.model) throw std::invalid_argument("task evaluation needs data and a model");
  }
  for (const auto& c : clients) {
    if (c.task_id < 0 || c.task_id >= static_cast<int>(tasks.size())) {
      throw std::invalid_argument("client " + std::to_string(c.client_id) +
                                  " references unknown task " + std::to_string(c.task_id));
    }
    if (c.test_indices.empty()) {
      throw std::invalid_argument("client " + std::to_string(c.client_id) +
                                  " has an empty test split");
    }
  }

  MetricsRow row;
  row.round = round;
  int64_t pooled_n = 0;
  double pooled_correct = 0.0;
  double pooled_loss = 0.0;
  for (size_t k = 0; k < tasks.size(); ++k) {
    std::vector<size_t> pooled;
    for (const auto& c : clients) {
      if (c.task_id != static_cast<int>(k)) continue;
      pooled.insert(pooled.end(), c.test_indices.begin(), c.test_indices.end());
    }
    if (pooled.empty()) {
      row.per_task_acc.push_back(0.0);
      continue;
    }
    EvalResult e = evaluate(tasks[k].setup, *tasks[k].model, *tasks[k].data, pooled, batch_size);
    row.per_task_acc.push_back(e.accuracy);
    const double n = static_cast<double>(pooled.size());
    pooled_n += static_cast<int64_t>(pooled.size());
    pooled_correct += e.accuracy * n;
    pooled_loss += e.loss * n;
  }
  if (pooled_n == 0) throw std::invalid_argument("no test samples across tasks");
  row.global_acc = pooled_correct / static_cast<double>(pooled_n);
  row.loss = pooled_loss / static_cast<double>(pooled_n);

  double acc_sum = 0.0;
  for (size_t i = 0; i < clients.size(); ++i) {
    const ClientState& c = clients[i];
    const TaskEval& t = tasks[static_cast<size_t>(c.task_id)];
    const ParamSet* model = client_models.empty() ? t.model : client_models[i];
    if (!model) throw std::invalid_argument("missing model for client " + std::to_string(c.client_id));
    acc_sum += evaluate(t.setup, *model, *t.data, c.test_indices, batch_size).accuracy;
  }
  row.mean_local_acc = acc_sum / static_cast<double>(clients.size());
  return row;
}

std::string run_to_json(const RunResult& rr) {
  nlohmann::json j;
  j["traces"] = nlohmann::json::array();
  for (const auto& t : rr.traces) {
    nlohmann::json row{{"round", t.round},
                       {"task", t.task_id},
                       {"clients", t.sampled_clients},
                       {"train_loss", t.train_loss},
                       {"params_up", t.params_up},
                       {"params_down", t.params_down}};
    if (t.eval_acc) row["eval_acc"] = *t.eval_acc;
    j["traces"].push_back(std::move(row));
  }
  j["client_eval"] = nlohmann::json::array();
  for (const auto& e : rr.client_eval) {
    j["client_eval"].push_back({{"loss", e.loss}, {"accuracy", e.accuracy}});
  }
  j["backbone_scalars_down"] = rr.backbone_scalars_down;
  if (!rr.round_digests.empty()) j["round_digests"] = rr.round_digests;
  return j.dump();
}

void write_round_csv(const RunResult& rr, const std::string& path) {
  std::ofstream out = open_or_throw(path);
  out << "round,task,clients,loss,acc,params_tx\n";
  for (const auto& t : rr.traces) {
    std::string ids;
    for (size_t i = 0; i < t.sampled_clients.size(); ++i) {
      if (i) ids += ';';
      ids += std::to_string(t.sampled_clients[i]);
    }
    out << t.round << ',' << t.task_id << ',' << ids << ',' << fmt_double(t.train_loss) << ','
        << (t.eval_acc ? fmt_double(*t.eval_acc) : "") << ',' << t.params_up << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

void write_comm_csv(const CommLedger& ledger, const std::string& path) {
  std::ofstream out = open_or_throw(path);
  out << "round,client,task,dir,params,bytes\n";
  for (const auto& r : ledger.records()) {
    out << r.round << ',' << r.client_id << ',' << r.task_id << ','
        << (r.dir == Direction::up ? "up" : "down") << ',' << r.param_count << ',' << r.bytes
        << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
  std::ofstream out = open_or_throw(path);
  out << "round,global_acc,mean_local_acc,per_task_acc,loss\n";
  for (const auto& r : rows) {
    out << r.round << ',' << fmt_double(r.global_acc) << ',' << fmt_double(r.mean_local_acc)
        << ',' << join_semicolon<double>(r.per_task_acc, fmt_double) << ',' << fmt_double(r.loss)
        << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace fedsim
