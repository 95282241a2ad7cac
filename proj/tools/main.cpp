// Command-line front end: run experiments from JSON configs, tabulate
// finished runs, and print the trainable-parameter table.

#include "fedsim/experiment.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

int cmd_run(const std::string& config_path, uint64_t seed, bool seed_set, int threads,
            bool threads_set, const std::string& out, bool out_set) {
  std::vector<std::string> errors;
  fedsim::ExperimentConfig cfg = fedsim::parse_experiment(slurp(config_path), errors);
  if (seed_set) cfg.seed = seed;
  if (threads_set) cfg.fed.threads = threads;
  if (out_set) cfg.out_dir = out;
  auto more = fedsim::validate_experiment(cfg);
  errors.insert(errors.end(), more.begin(), more.end());
  if (!errors.empty()) {
    std::cerr << config_path << " is not runnable:\n";
    for (const std::string& e : errors) std::cerr << "  " << e << '\n';
    return 1;
  }

  std::cout << fedsim::experiment_to_json(cfg) << '\n';
  fedsim::RunArtifacts art = fedsim::run_experiment(cfg);

  const fedsim::MetricsRow& m = art.final_metrics;
  std::printf("round %d  global_acc %.4f  mean_local_acc %.4f  loss %.4f\n", m.round,
              m.global_acc, m.mean_local_acc, m.loss);
  for (size_t k = 0; k < m.per_task_acc.size(); ++k) {
    std::printf("  task%zu acc %.4f\n", k, m.per_task_acc[k]);
  }
  if (art.has_forgetting) {
    std::printf("forgetting %.4f (%.4f -> %.4f)\n", art.forgetting,
                art.acc_before_personalization, art.acc_after_personalization);
  }
  std::printf("uploaded %lld params (%lld bytes)\n",
              static_cast<long long>(art.ledger.total_params(fedsim::Direction::up)),
              static_cast<long long>(art.ledger.total_bytes(fedsim::Direction::up)));
  std::printf("wrote %zu files under %s\n", art.files.size(), cfg.out_dir.c_str());
  return 0;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& csv_path) {
  fedsim::Report rep = fedsim::report_runs(dirs);
  std::cout << rep.text;
  if (!csv_path.empty()) {
    std::ofstream out(csv_path);
    if (!out) throw std::runtime_error("cannot open " + csv_path);
    out << rep.csv;
    std::cout << "csv written to " << csv_path << '\n';
  }
  return 0;
}

int cmd_count(const std::string& preset_name, const std::string& method) {
  if (preset_name.empty()) {
    std::cout << fedsim::format_count_table(fedsim::count_table());
    return 0;
  }
  if (method.empty()) {
    std::vector<fedsim::CountCell> cells;
    for (const char* m : {"full", "header", "adapter", "lora", "vpt"}) {
      cells.push_back(fedsim::count_cell(preset_name, m));
    }
    std::cout << fedsim::format_count_table(cells);
    return 0;
  }
  fedsim::CountCell cell = fedsim::count_cell(preset_name, method);
  std::cout << cell.count << (cell.head_excluded ? " (head excluded)" : "") << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated fine-tuning simulator"};
  app.require_subcommand(1);

  std::string config_path;
  uint64_t seed = 0;
  int threads = 0;
  std::string out_dir;
  CLI::App* run = app.add_subcommand("run", "Run an experiment from a JSON config");
  run->add_option("config", config_path, "Experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  CLI::Option* seed_opt = run->add_option("--seed", seed, "Override the run seed");
  CLI::Option* threads_opt = run->add_option("--threads", threads, "Worker threads (0 = serial)");
  CLI::Option* out_opt = run->add_option("--out", out_dir, "Override the output directory");

  std::vector<std::string> dirs;
  std::string csv_path;
  CLI::App* report = app.add_subcommand("report", "Tabulate finished runs (first = baseline)");
  report->add_option("dirs", dirs, "Run output directories")->required()->expected(-1);
  report->add_option("--csv", csv_path, "Also write the table as CSV to this file");

  std::string preset_name;
  std::string method;
  CLI::App* count = app.add_subcommand("count-params", "Print trainable-parameter counts");
  count->add_option("preset", preset_name, "Backbone preset (omit for the full table)");
  count->add_option("method", method, "full, header, adapter, lora, or vpt");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      return cmd_run(config_path, seed, static_cast<bool>(*seed_opt), threads,
                     static_cast<bool>(*threads_opt), out_dir, static_cast<bool>(*out_opt));
    }
    if (report->parsed()) return cmd_report(dirs, csv_path);
    if (count->parsed()) return cmd_count(preset_name, method);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
