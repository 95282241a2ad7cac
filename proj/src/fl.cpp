#include "fedsim/fl.hpp"

#include "fedsim/rng.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>
#include <utility>

namespace fedsim {

namespace {

constexpr uint64_t kSampleTag = 0x73616d70ULL;    // round sampling stream
constexpr uint64_t kShuffleTag = 0x62617463ULL;   // per-client batch order
constexpr uint64_t kPersonalTag = 0x70657273ULL;  // personalization batch order

int64_t steps_per_epoch(size_t n, int batch) {
  return static_cast<int64_t>((n + static_cast<size_t>(batch) - 1) / static_cast<size_t>(batch));
}

// Runs fn(0..n-1) on up to `threads` workers (0 = hardware). Work items are
// independent and land in caller-owned slots, so results do not depend on the
// worker count or schedule.
void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn) {
  if (n == 0) return;
  size_t want = threads <= 0 ? std::max(1u, std::thread::hardware_concurrency())
                             : static_cast<size_t>(threads);
  want = std::min(want, n);
  if (want <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto work = [&] {
    while (true) {
      size_t i = next.fetch_add(1);
      if (i >= n) break;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(want - 1);
  for (size_t t = 0; t + 1 < want; ++t) pool.emplace_back(work);
  work();
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

// E epochs of mini-batch SGD with momentum from a private copy of w_start.
// The LR schedule is evaluated at step_base + local step against total_steps,
// so federated rounds continue one global schedule while personalization
// starts a fresh one. Momentum buffers are created here: they never survive
// past the call, which is what resets them between rounds.
ParamSet tune_impl(const ClientState& client, const ParamSet& w_start, const Dataset& data,
                   const TaskSetup& setup, const FedConfig& cfg, int epochs, int64_t step_base,
                   int64_t total_steps, uint64_t shuffle_seed, double* mean_loss_out) {
  if (client.train_indices.empty()) {
    throw std::invalid_argument("client " + std::to_string(client.client_id) +
                                " has an empty train split");
  }
  ParamSet w = w_start.clone();
  if (epochs == 0) {
    if (mean_loss_out) *mean_loss_out = 0.0;
    return w;
  }

  const std::vector<std::string> names = w.trainable_names();
  std::vector<std::pair<std::string, Tensor>> anchors;
  if (cfg.prox_mu > 0.0) {
    for (const auto& name : names) anchors.emplace_back(name, w_start.at(name).clone(false));
  }

  Rng rng(shuffle_seed);
  std::map<std::string, std::vector<double>> velocity;
  std::vector<double> scratch;
  const int64_t spe = steps_per_epoch(client.train_indices.size(), cfg.batch_size);
  double loss_sum = 0.0;
  int64_t batches_run = 0;

  std::vector<size_t> order = client.train_indices;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    for (int64_t b = 0; b < spe; ++b) {
      size_t begin = static_cast<size_t>(b) * static_cast<size_t>(cfg.batch_size);
      size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.batch_size));
      std::vector<size_t> batch(order.begin() + static_cast<int64_t>(begin),
                                order.begin() + static_cast<int64_t>(end));
      auto [images, labels] = gather(data, batch);
      VitOutput out = task_forward(setup, w, images);
      Tensor data_loss = cross_entropy(out.logits, labels);
      loss_sum += data_loss.item();
      ++batches_run;

      Tensor objective = data_loss;
      if (!anchors.empty()) {
        Tensor prox;
        for (const auto& [name, anchor] : anchors) {
          Tensor diff = sub(w.at(name), anchor);
          Tensor sq = sum_all(mul(diff, diff));
          prox = prox.defined() ? add(prox, sq) : sq;
        }
        objective = add(objective, scale(prox, cfg.prox_mu / 2.0));
      }

      w.zero_grads();
      backward(objective);

      const double lr = lr_at(step_base + epoch * spe + b, total_steps, cfg);
      for (const auto& name : names) {
        Tensor& t = w.at(name);
        auto& v = velocity[name];
        if (v.empty()) v.assign(static_cast<size_t>(t.numel()), 0.0);
        std::span<const double> g;
        if (t.has_grad()) g = t.grad();
        auto vals = t.data();
        scratch.assign(vals.begin(), vals.end());
        for (size_t j = 0; j < scratch.size(); ++j) {
          double gj = (g.empty() ? 0.0 : g[j]) + cfg.weight_decay * scratch[j];
          v[j] = cfg.momentum * v[j] + gj;
          scratch[j] -= lr * v[j];
        }
        t.apply_values(scratch);
      }
    }
  }
  if (mean_loss_out) *mean_loss_out = loss_sum / static_cast<double>(batches_run);
  return w;
}

void validate_task(const FedTask& task, size_t position) {
  if (task.task_id != static_cast<int>(position)) {
    throw std::invalid_argument("task_id " + std::to_string(task.task_id) +
                                " must equal its position " + std::to_string(position));
  }
  if (!task.data) throw std::invalid_argument("task " + std::to_string(task.task_id) + " has no dataset");
  if (task.w_train.trainable_count() == 0) {
    throw std::invalid_argument("task " + std::to_string(task.task_id) +
                                " has no trainable parameters");
  }
  if (task.setup.mode != UpdateMode::full && !task.setup.backbone) {
    throw std::invalid_argument("task " + std::to_string(task.task_id) +
                                " needs a frozen backbone in " +
                                update_mode_name(task.setup.mode) + " mode");
  }
  if (task.setup.mode == UpdateMode::head_only &&
      task.setup.spec.kind != ModuleKind::head_only) {
    throw std::invalid_argument("head_only mode requires a head_only module spec");
  }
}

void validate_clients(const std::vector<ClientState>& clients, size_t num_tasks) {
  if (clients.empty()) throw std::invalid_argument("no clients");
  for (size_t i = 0; i < clients.size(); ++i) {
    const ClientState& c = clients[i];
    if (c.task_id < 0 || c.task_id >= static_cast<int>(num_tasks)) {
      throw std::invalid_argument("client " + std::to_string(c.client_id) +
                                  " references unknown task " + std::to_string(c.task_id));
    }
    if (i > 0 && clients[i - 1].client_id >= c.client_id) {
      throw std::invalid_argument("clients must be sorted by strictly increasing client_id");
    }
    if (c.train_indices.empty()) {
      throw std::invalid_argument("client " + std::to_string(c.client_id) +
                                  " has an empty train split");
    }
  }
}

std::vector<size_t> pooled_test_indices(const std::vector<ClientState>& clients, int task_id) {
  std::vector<size_t> pooled;
  for (const auto& c : clients) {
    if (c.task_id != task_id) continue;
    pooled.insert(pooled.end(), c.test_indices.begin(), c.test_indices.end());
  }
  return pooled;
}

}  // namespace

std::string update_mode_name(UpdateMode mode) {
  switch (mode) {
    case UpdateMode::full: return "full";
    case UpdateMode::modular: return "modular";
    case UpdateMode::head_only: return "head_only";
  }
  throw std::logic_error("unknown update mode");
}

UpdateMode update_mode_from_name(const std::string& name) {
  if (name == "full") return UpdateMode::full;
  if (name == "modular") return UpdateMode::modular;
  if (name == "head_only") return UpdateMode::head_only;
  throw std::invalid_argument("unknown update mode: " + name);
}

std::string scheme_name(Scheme s) {
  switch (s) {
    case Scheme::local_only: return "local_only";
    case Scheme::fedavg: return "fedavg";
    case Scheme::fedavg_local: return "fedavg_local";
  }
  throw std::logic_error("unknown scheme");
}

Scheme scheme_from_name(const std::string& name) {
  if (name == "local_only") return Scheme::local_only;
  if (name == "fedavg") return Scheme::fedavg;
  if (name == "fedavg_local") return Scheme::fedavg_local;
  throw std::invalid_argument("unknown scheme: " + name);
}

void validate_config(const FedConfig& cfg, size_t population) {
  if (population == 0) throw std::invalid_argument("population is empty");
  if (cfg.rounds <= 0) throw std::invalid_argument("rounds must be positive");
  if (cfg.clients_per_round < 0 ||
      cfg.clients_per_round > static_cast<int>(population)) {
    throw std::invalid_argument("clients_per_round must lie in [0, population]");
  }
  if (cfg.local_epochs <= 0) throw std::invalid_argument("local_epochs must be positive");
  if (cfg.batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  if (!(cfg.lr_peak > 0.0)) throw std::invalid_argument("lr_peak must be positive");
  if (cfg.warmup_fraction < 0.0 || cfg.warmup_fraction >= 1.0) {
    throw std::invalid_argument("warmup_fraction must lie in [0, 1)");
  }
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) {
    throw std::invalid_argument("momentum must lie in [0, 1)");
  }
  if (cfg.weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
  if (cfg.prox_mu < 0.0) throw std::invalid_argument("prox_mu must be non-negative");
  if (cfg.personal_epochs < 0) throw std::invalid_argument("personal_epochs must be non-negative");
  if (cfg.eval_every < 0) throw std::invalid_argument("eval_every must be non-negative");
  if (cfg.threads < 0) throw std::invalid_argument("threads must be non-negative");
}

double lr_at(int64_t step, int64_t total_steps, const FedConfig& cfg) {
  if (total_steps <= 0) throw std::invalid_argument("total_steps must be positive");
  if (step < 0) throw std::invalid_argument("step must be non-negative");
  const int64_t warm = static_cast<int64_t>(cfg.warmup_fraction * static_cast<double>(total_steps));
  if (step < warm) return cfg.lr_peak * static_cast<double>(step) / static_cast<double>(warm);
  if (warm >= total_steps) return cfg.lr_peak;
  double progress = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  progress = std::min(progress, 1.0);
  return cfg.lr_peak * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
}

VitOutput task_forward(const TaskSetup& setup, const ParamSet& trainable, const Tensor& images) {
  if (setup.mode == UpdateMode::full) return vit_forward(trainable, setup.config, images);
  if (!setup.backbone) throw std::logic_error("task_forward: no backbone in a modular mode");
  return adapted_forward(setup.config, setup.spec, trainable, *setup.backbone, images);
}

EvalResult evaluate(const TaskSetup& setup, const ParamSet& trainable, const Dataset& ds,
                    const std::vector<size_t>& indices, int batch_size) {
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  if (indices.empty()) return {};
  NoGradGuard no_grad;
  double loss_sum = 0.0;
  int64_t correct = 0;
  for (size_t pos = 0; pos < indices.size(); pos += static_cast<size_t>(batch_size)) {
    size_t end = std::min(indices.size(), pos + static_cast<size_t>(batch_size));
    std::vector<size_t> batch(indices.begin() + static_cast<int64_t>(pos),
                              indices.begin() + static_cast<int64_t>(end));
    auto [images, labels] = gather(ds, batch);
    VitOutput out = task_forward(setup, trainable, images);
    loss_sum += cross_entropy(out.logits, labels).item() * static_cast<double>(batch.size());
    auto vals = out.logits.data();
    const int64_t classes = out.logits.dim(1);
    for (size_t r = 0; r < batch.size(); ++r) {
      int best = 0;
      double best_val = vals[r * static_cast<size_t>(classes)];
      for (int64_t c = 1; c < classes; ++c) {
        double v = vals[r * static_cast<size_t>(classes) + static_cast<size_t>(c)];
        if (v > best_val) {
          best_val = v;
          best = static_cast<int>(c);
        }
      }
      correct += best == labels[r] ? 1 : 0;
    }
  }
  const double n = static_cast<double>(indices.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

ParamSet local_tuning(const ClientState& client, const ParamSet& w_start, const Dataset& data,
                      const TaskSetup& setup, const FedConfig& cfg, int round) {
  const int64_t spe = steps_per_epoch(client.train_indices.size(), cfg.batch_size);
  const int64_t step_base = static_cast<int64_t>(round) * cfg.local_epochs * spe;
  const int64_t total = static_cast<int64_t>(cfg.rounds) * cfg.local_epochs * spe;
  const uint64_t shuffle_seed =
      mix_seed({cfg.seed, kShuffleTag, static_cast<uint64_t>(round),
                static_cast<uint64_t>(client.client_id)});
  return tune_impl(client, w_start, data, setup, cfg, cfg.local_epochs, step_base, total,
                   shuffle_seed, nullptr);
}

ParamSet personal_tuning(const ClientState& client, const ParamSet& w_start, const Dataset& data,
                         const TaskSetup& setup, const FedConfig& cfg) {
  if (cfg.personal_epochs == 0) return w_start.clone();
  const int64_t spe = steps_per_epoch(client.train_indices.size(), cfg.batch_size);
  const int64_t total = static_cast<int64_t>(cfg.personal_epochs) * spe;
  const uint64_t shuffle_seed =
      mix_seed({cfg.seed, kPersonalTag, static_cast<uint64_t>(client.client_id)});
  return tune_impl(client, w_start, data, setup, cfg, cfg.personal_epochs, 0, total, shuffle_seed,
                   nullptr);
}

std::vector<int> sample_clients(size_t population, int m, uint64_t seed, int round) {
  if (m <= 0 || m > static_cast<int>(population)) {
    throw std::invalid_argument("sample size must lie in [1, population]");
  }
  std::vector<int> ids(population);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(mix_seed({seed, kSampleTag, static_cast<uint64_t>(round)}));
  rng.shuffle(ids);
  ids.resize(static_cast<size_t>(m));
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<double> average_flat(const std::vector<const std::vector<double>*>& vecs,
                                 const std::vector<int64_t>& counts) {
  if (vecs.empty()) throw std::invalid_argument("average_flat: nothing to average");
  if (vecs.size() != counts.size()) {
    throw std::invalid_argument("average_flat: one count per vector required");
  }
  const size_t len = vecs[0]->size();
  bool equal = true;
  int64_t total = 0;
  for (size_t i = 0; i < vecs.size(); ++i) {
    if (vecs[i]->size() != len) throw std::invalid_argument("average_flat: length mismatch");
    if (counts[i] <= 0) throw std::invalid_argument("average_flat: counts must be positive");
    equal = equal && counts[i] == counts[0];
    total += counts[i];
  }
  std::vector<double> acc(len, 0.0);
  if (equal) {
    for (const auto* v : vecs) {
      for (size_t j = 0; j < len; ++j) acc[j] += (*v)[j];
    }
    const double d = static_cast<double>(vecs.size());
    for (size_t j = 0; j < len; ++j) acc[j] /= d;
  } else {
    for (size_t i = 0; i < vecs.size(); ++i) {
      const double n = static_cast<double>(counts[i]);
      const auto& v = *vecs[i];
      for (size_t j = 0; j < len; ++j) acc[j] += v[j] * n;
    }
    const double d = static_cast<double>(total);
    for (size_t j = 0; j < len; ++j) acc[j] /= d;
  }
  // Canonical +0.0 keeps grouped and sparse-sum aggregation bitwise identical.
  for (auto& x : acc) {
    if (x == 0.0) x = 0.0;
  }
  return acc;
}

RunResult run_federated(std::vector<FedTask> tasks, const std::vector<ClientState>& clients,
                        const FedConfig& cfg) {
  validate_config(cfg, clients.size());
  if (tasks.empty()) throw std::invalid_argument("no tasks");
  for (size_t k = 0; k < tasks.size(); ++k) validate_task(tasks[k], k);
  validate_clients(clients, tasks.size());
  const int K = static_cast<int>(tasks.size());
  const int64_t P0 = tasks[0].w_train.scalar_count(true);
  if (cfg.sparse_wire) {
    for (const auto& t : tasks) {
      if (t.setup.mode == UpdateMode::full) {
        throw std::invalid_argument("sparse aggregation applies to module updates only");
      }
      if (t.w_train.scalar_count(true) != P0) {
        throw std::invalid_argument("sparse aggregation needs equal module sizes across tasks");
      }
    }
  }
  const int M = cfg.clients_per_round == 0 ? static_cast<int>(clients.size())
                                           : cfg.clients_per_round;

  RunResult rr;
  for (const auto& c : clients) {
    const FedTask& t = tasks[static_cast<size_t>(c.task_id)];
    if (t.setup.mode != UpdateMode::full) {
      rr.backbone_scalars_down += t.setup.backbone->scalar_count(false);
    }
  }

  struct ClientResult {
    std::vector<double> flat;
    double loss = 0.0;
  };

  for (int round = 0; round < cfg.rounds; ++round) {
    const std::vector<int> sampled = sample_clients(clients.size(), M, cfg.seed, round);
    std::vector<ClientResult> results(sampled.size());
    parallel_for(sampled.size(), cfg.threads, [&](size_t i) {
      const ClientState& c = clients[static_cast<size_t>(sampled[i])];
      const FedTask& task = tasks[static_cast<size_t>(c.task_id)];
      const int64_t spe = steps_per_epoch(c.train_indices.size(), cfg.batch_size);
      const int64_t step_base = static_cast<int64_t>(round) * cfg.local_epochs * spe;
      const int64_t total = static_cast<int64_t>(cfg.rounds) * cfg.local_epochs * spe;
      const uint64_t shuffle_seed =
          mix_seed({cfg.seed, kShuffleTag, static_cast<uint64_t>(round),
                    static_cast<uint64_t>(c.client_id)});
      ParamSet w = tune_impl(c, task.w_train, *task.data, task.setup, cfg, cfg.local_epochs,
                             step_base, total, shuffle_seed, &results[i].loss);
      results[i].flat = w.flatten_trainable();
    });

    // sampled is ascending and clients are id-sorted, so per-task slot lists
    // are already in ascending client_id order: the reduction order is fixed.
    std::vector<std::vector<size_t>> by_task(static_cast<size_t>(K));
    for (size_t i = 0; i < sampled.size(); ++i) {
      by_task[static_cast<size_t>(clients[static_cast<size_t>(sampled[i])].task_id)].push_back(i);
    }

    if (cfg.sparse_wire) {
      // Wire form: every contributor sends a K*P vector that is zero outside
      // its task's segment; the server adds whole vectors in client order and
      // divides each segment by its contributor weight.
      std::vector<char> seg_equal(static_cast<size_t>(K), 1);
      std::vector<int64_t> seg_total(static_cast<size_t>(K), 0);
      for (int k = 0; k < K; ++k) {
        const auto& slots = by_task[static_cast<size_t>(k)];
        if (slots.empty()) continue;
        int64_t first = static_cast<int64_t>(
            clients[static_cast<size_t>(sampled[slots[0]])].train_indices.size());
        for (size_t slot : slots) {
          int64_t n = static_cast<int64_t>(
              clients[static_cast<size_t>(sampled[slot])].train_indices.size());
          seg_equal[static_cast<size_t>(k)] &= n == first ? 1 : 0;
          seg_total[static_cast<size_t>(k)] += n;
        }
      }
      std::vector<double> acc(static_cast<size_t>(K) * static_cast<size_t>(P0), 0.0);
      for (size_t i = 0; i < sampled.size(); ++i) {
        const ClientState& c = clients[static_cast<size_t>(sampled[i])];
        std::vector<double> padded(acc.size(), 0.0);
        std::copy(results[i].flat.begin(), results[i].flat.end(),
                  padded.begin() + static_cast<int64_t>(c.task_id) * P0);
        if (seg_equal[static_cast<size_t>(c.task_id)]) {
          for (size_t j = 0; j < acc.size(); ++j) acc[j] += padded[j];
        } else {
          const double n = static_cast<double>(c.train_indices.size());
          for (size_t j = 0; j < acc.size(); ++j) acc[j] += padded[j] * n;
        }
      }
      for (int k = 0; k < K; ++k) {
        const auto& slots = by_task[static_cast<size_t>(k)];
        if (slots.empty()) continue;
        const double d = seg_equal[static_cast<size_t>(k)]
                             ? static_cast<double>(slots.size())
                             : static_cast<double>(seg_total[static_cast<size_t>(k)]);
        std::vector<double> seg(acc.begin() + static_cast<int64_t>(k) * P0,
                                acc.begin() + static_cast<int64_t>(k + 1) * P0);
        for (auto& x : seg) {
          x /= d;
          if (x == 0.0) x = 0.0;
        }
        tasks[static_cast<size_t>(k)].w_train.load_flat_trainable(seg);
      }
    } else {
      for (int k = 0; k < K; ++k) {
        const auto& slots = by_task[static_cast<size_t>(k)];
        if (slots.empty()) continue;
        std::vector<const std::vector<double>*> vecs;
        std::vector<int64_t> counts;
        for (size_t slot : slots) {
          vecs.push_back(&results[slot].flat);
          counts.push_back(static_cast<int64_t>(
              clients[static_cast<size_t>(sampled[slot])].train_indices.size()));
        }
        tasks[static_cast<size_t>(k)].w_train.load_flat_trainable(average_flat(vecs, counts));
      }
    }

    if (cfg.round_digests) {
      std::vector<std::string> digests;
      digests.reserve(tasks.size());
      for (const auto& t : tasks) digests.push_back(params_digest(t.w_train));
      rr.round_digests.push_back(std::move(digests));
    }

    const bool eval_now = cfg.eval_every > 0 && (round + 1) % cfg.eval_every == 0;
    for (int k = 0; k < K; ++k) {
      const auto& slots = by_task[static_cast<size_t>(k)];
      if (slots.empty()) continue;
      RoundTrace trace;
      trace.round = round;
      trace.task_id = k;
      double loss_sum = 0.0;
      for (size_t slot : slots) {
        trace.sampled_clients.push_back(clients[static_cast<size_t>(sampled[slot])].client_id);
        loss_sum += results[slot].loss;
      }
      trace.train_loss = loss_sum / static_cast<double>(slots.size());
      const int64_t per_client =
          cfg.sparse_wire ? P0 * K
                          : tasks[static_cast<size_t>(k)].w_train.scalar_count(true);
      trace.params_up = per_client * static_cast<int64_t>(slots.size());
      trace.params_down = per_client * static_cast<int64_t>(slots.size());
      if (eval_now) {
        const FedTask& task = tasks[static_cast<size_t>(k)];
        trace.eval_acc = evaluate(task.setup, task.w_train, *task.data,
                                  pooled_test_indices(clients, k), cfg.batch_size)
                             .accuracy;
      }
      rr.traces.push_back(std::move(trace));
    }
  }

  rr.client_eval.resize(clients.size());
  parallel_for(clients.size(), cfg.threads, [&](size_t i) {
    const ClientState& c = clients[i];
    const FedTask& task = tasks[static_cast<size_t>(c.task_id)];
    rr.client_eval[i] =
        evaluate(task.setup, task.w_train, *task.data, c.test_indices, cfg.batch_size);
  });

  rr.task_params.reserve(tasks.size());
  for (auto& t : tasks) rr.task_params.push_back(std::move(t.w_train));
  return rr;
}

namespace {

RunResult run_local_only(FedTask task, const std::vector<ClientState>& clients,
                         const FedConfig& cfg) {
  validate_config(cfg, clients.size());
  validate_task(task, 0);
  validate_clients(clients, 1);

  const size_t n = clients.size();
  std::vector<ParamSet> models(n);
  std::vector<std::vector<double>> losses(n, std::vector<double>(static_cast<size_t>(cfg.rounds)));
  std::vector<std::map<int, double>> accs(n);

  parallel_for(n, cfg.threads, [&](size_t i) {
    const ClientState& c = clients[i];
    ParamSet w = task.w_train.clone();
    for (int round = 0; round < cfg.rounds; ++round) {
      const int64_t spe = steps_per_epoch(c.train_indices.size(), cfg.batch_size);
      const int64_t step_base = static_cast<int64_t>(round) * cfg.local_epochs * spe;
      const int64_t total = static_cast<int64_t>(cfg.rounds) * cfg.local_epochs * spe;
      const uint64_t shuffle_seed =
          mix_seed({cfg.seed, kShuffleTag, static_cast<uint64_t>(round),
                    static_cast<uint64_t>(c.client_id)});
      w = tune_impl(c, w, *task.data, task.setup, cfg, cfg.local_epochs, step_base, total,
                    shuffle_seed, &losses[i][static_cast<size_t>(round)]);
      if (cfg.eval_every > 0 && (round + 1) % cfg.eval_every == 0) {
        accs[i][round] =
            evaluate(task.setup, w, *task.data, c.test_indices, cfg.batch_size).accuracy;
      }
    }
    models[i] = std::move(w);
  });

  RunResult rr;
  for (int round = 0; round < cfg.rounds; ++round) {
    RoundTrace trace;
    trace.round = round;
    trace.task_id = task.task_id;
    double loss_sum = 0.0;
    for (size_t i = 0; i < n; ++i) {
      trace.sampled_clients.push_back(clients[i].client_id);
      loss_sum += losses[i][static_cast<size_t>(round)];
    }
    trace.train_loss = loss_sum / static_cast<double>(n);
    trace.params_up = 0;  // nothing is transmitted: every client stays local
    trace.params_down = 0;
    if (cfg.eval_every > 0 && (round + 1) % cfg.eval_every == 0) {
      double acc_sum = 0.0;
      for (size_t i = 0; i < n; ++i) acc_sum += accs[i].at(round);
      trace.eval_acc = acc_sum / static_cast<double>(n);
    }
    rr.traces.push_back(std::move(trace));
  }

  rr.client_eval.resize(n);
  parallel_for(n, cfg.threads, [&](size_t i) {
    rr.client_eval[i] = evaluate(task.setup, models[i], *task.data, clients[i].test_indices,
                                 cfg.batch_size);
  });
  rr.client_params = std::move(models);
  return rr;
}

}  // namespace

RunResult run_scheme(Scheme scheme, FedTask task, const std::vector<ClientState>& clients,
                     const FedConfig& cfg) {
  if (scheme == Scheme::local_only) return run_local_only(std::move(task), clients, cfg);

  const TaskSetup setup = task.setup;
  const Dataset* data = task.data;
  std::vector<FedTask> tasks;
  tasks.push_back(std::move(task));
  RunResult rr = run_federated(std::move(tasks), clients, cfg);
  if (scheme == Scheme::fedavg) return rr;

  // fedavg_local: per-client personalization from the final global set.
  std::vector<ParamSet> models(clients.size());
  parallel_for(clients.size(), cfg.threads, [&](size_t i) {
    models[i] = personal_tuning(clients[i], rr.task_params[0], *data, setup, cfg);
  });
  rr.client_eval.resize(clients.size());
  parallel_for(clients.size(), cfg.threads, [&](size_t i) {
    rr.client_eval[i] =
        evaluate(setup, models[i], *data, clients[i].test_indices, cfg.batch_size);
  });
  rr.client_params = std::move(models);
  return rr;
}

RunResult run_fedyolo(std::vector<FedTask> tasks, const std::vector<ClientState>& clients,
                      const FedConfig& cfg) {
  return run_federated(std::move(tasks), clients, cfg);
}

}  // namespace fedsim
