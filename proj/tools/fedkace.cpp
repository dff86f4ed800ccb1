// Command-line front end for the streaming federated continual learning
// simulator. `run` executes one method and writes rounds.csv/summary.json,
// `suite` runs the acceptance checks, `dump-schedule` and `dump-buffer`
// expose the per-client category windows and the replay buffer contents.

#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedkace/config.hpp"
#include "fedkace/data_stream.hpp"
#include "fedkace/errors.hpp"
#include "fedkace/federation.hpp"
#include "fedkace/kernel_buffer.hpp"
#include "fedkace/metrics.hpp"
#include "fedkace/serialize.hpp"
#include "fedkace/testing/acceptance.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRunFailure = 1;
constexpr int kExitUsage = 2;

std::string default_out_dir() {
  const char* env = std::getenv("FEDKACE_OUT");
  return env && *env ? env : "out";
}

std::string method_list() {
  std::string s;
  for (const auto& [name, variant] : fedkace::method_names()) {
    (void)variant;
    if (!s.empty()) s += ", ";
    s += name;
  }
  return s;
}

// Shared experiment options. dump-buffer reuses the full set; dump-schedule
// only the schedule-shaped subset.
void add_experiment_options(CLI::App& cmd, fedkace::ExperimentConfig& cfg,
                            std::string& method) {
  cmd.add_option("-m,--method", method,
                 "protocol variant (" + method_list() + ")")
      ->default_val("fedkace");
  cmd.add_option("-K,--clients", cfg.num_clients, "number of clients")
      ->default_val(cfg.num_clients);
  cmd.add_option("-T,--rounds", cfg.rounds, "federated rounds")
      ->default_val(cfg.rounds);
  cmd.add_option("--c-max", cfg.c_max, "total category count")
      ->default_val(cfg.c_max);
  cmd.add_option("-w,--window", cfg.window, "categories per round")
      ->default_val(cfg.window);
  cmd.add_option("-O,--overlap", cfg.overlap,
                 "carried-over categories between rounds")
      ->default_val(cfg.overlap);
  cmd.add_option("-M,--buffer", cfg.buffer_capacity, "replay buffer capacity")
      ->default_val(cfg.buffer_capacity);
  cmd.add_option("-J,--epochs", cfg.epochs, "local epochs per round")
      ->default_val(cfg.epochs);
  cmd.add_option("--batch", cfg.batch_size, "minibatch size")
      ->default_val(cfg.batch_size);
  cmd.add_option("--lr0", cfg.lr0, "initial learning rate")
      ->default_val(cfg.lr0);
  cmd.add_option("--weight-decay", cfg.weight_decay, "decoupled weight decay")
      ->default_val(cfg.weight_decay);
  cmd.add_option("--feature-dim", cfg.feature_dim, "input dimensionality")
      ->default_val(cfg.feature_dim);
  cmd.add_option("--hidden-dim", cfg.hidden_dim, "hidden layer width")
      ->default_val(cfg.hidden_dim);
  cmd.add_option("--n-per-cat", cfg.n_per_cat,
                 "training samples per category per round")
      ->default_val(cfg.n_per_cat);
  cmd.add_option("--n-test-per-cat", cfg.n_test_per_cat,
                 "test samples per category")
      ->default_val(cfg.n_test_per_cat);
  cmd.add_option("--noise-sigma", cfg.noise_sigma, "per-sample noise scale")
      ->default_val(cfg.noise_sigma);
  cmd.add_option("--separation", cfg.separation, "category mean scale")
      ->default_val(cfg.separation);
  cmd.add_option("-s,--seed", cfg.seed, "master seed")->default_val(cfg.seed);
  cmd.add_option("--lambda-max", cfg.lambda_max, "replay weight ceiling")
      ->default_val(cfg.lambda_max);
  cmd.add_option("--eps-den", cfg.eps_den,
                 "replay weight denominator floor")
      ->default_val(cfg.eps_den);
  cmd.add_flag("--lambda-norm-averaging", cfg.lambda_norm_averaging,
               "average squared gradient norms instead of gradient vectors");
  cmd.add_flag("--sgd", cfg.plain_sgd, "plain SGD instead of AdamW");
  cmd.add_flag("--weighted-aggregation", cfg.weighted_aggregation,
               "weight server averaging by client sample counts");
  cmd.add_flag("--centralized-cold-start", cfg.centralized_cold_start,
               "retrain the centralized reference from round one each round");
  cmd.add_option("--log-base", cfg.log_base,
                 "log base for buffer scoring (e, 2 or 10)")
      ->default_val(cfg.log_base);
  cmd.add_option("--workers", cfg.workers, "worker threads (results identical"
                 " for any count)")
      ->default_val(cfg.workers);
  cmd.add_option("--cond-window", cfg.cond_window,
                 "trailing rounds in the condition number summary (0: 3T/4)")
      ->default_val(cfg.cond_window);
}

std::map<std::string, std::string> read_key_value_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw fedkace::config_error("cannot read config file " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string{};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(is, line)) {
    const auto comment = line.find_first_of("#;");
    if (comment != std::string::npos) line.erase(comment);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw fedkace::config_error("config line without '=': " + line);
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

// Applies file values to every option the command line left untouched, so
// flags always win. Unknown keys and malformed values are usage errors.
void apply_config_file(CLI::App& cmd, const std::string& path,
                       fedkace::ExperimentConfig& cfg, std::string& method,
                       bool& no_regret) {
  auto as_int = [](const std::string& v, const std::string& key) {
    try {
      std::size_t pos = 0;
      const int x = std::stoi(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw fedkace::config_error("config value for '" + key +
                                  "' is not an integer: " + v);
    }
  };
  auto as_u64 = [](const std::string& v, const std::string& key) {
    try {
      std::size_t pos = 0;
      const unsigned long long x = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return static_cast<std::uint64_t>(x);
    } catch (const std::exception&) {
      throw fedkace::config_error("config value for '" + key +
                                  "' is not an unsigned integer: " + v);
    }
  };
  auto as_double = [](const std::string& v, const std::string& key) {
    try {
      std::size_t pos = 0;
      const double x = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw fedkace::config_error("config value for '" + key +
                                  "' is not a number: " + v);
    }
  };
  auto as_bool = [](const std::string& v, const std::string& key) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw fedkace::config_error("config value for '" + key +
                                "' is not a boolean: " + v);
  };

  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Setter> setters = {
      {"method", [&](const std::string& v, const std::string&) { method = v; }},
      {"clients", [&](const std::string& v, const std::string& k) { cfg.num_clients = as_int(v, k); }},
      {"rounds", [&](const std::string& v, const std::string& k) { cfg.rounds = as_int(v, k); }},
      {"c-max", [&](const std::string& v, const std::string& k) { cfg.c_max = as_int(v, k); }},
      {"window", [&](const std::string& v, const std::string& k) { cfg.window = as_int(v, k); }},
      {"overlap", [&](const std::string& v, const std::string& k) { cfg.overlap = as_int(v, k); }},
      {"buffer", [&](const std::string& v, const std::string& k) { cfg.buffer_capacity = as_int(v, k); }},
      {"epochs", [&](const std::string& v, const std::string& k) { cfg.epochs = as_int(v, k); }},
      {"batch", [&](const std::string& v, const std::string& k) { cfg.batch_size = as_int(v, k); }},
      {"lr0", [&](const std::string& v, const std::string& k) { cfg.lr0 = as_double(v, k); }},
      {"weight-decay", [&](const std::string& v, const std::string& k) { cfg.weight_decay = as_double(v, k); }},
      {"feature-dim", [&](const std::string& v, const std::string& k) { cfg.feature_dim = as_int(v, k); }},
      {"hidden-dim", [&](const std::string& v, const std::string& k) { cfg.hidden_dim = as_int(v, k); }},
      {"n-per-cat", [&](const std::string& v, const std::string& k) { cfg.n_per_cat = as_int(v, k); }},
      {"n-test-per-cat", [&](const std::string& v, const std::string& k) { cfg.n_test_per_cat = as_int(v, k); }},
      {"noise-sigma", [&](const std::string& v, const std::string& k) { cfg.noise_sigma = as_double(v, k); }},
      {"separation", [&](const std::string& v, const std::string& k) { cfg.separation = as_double(v, k); }},
      {"seed", [&](const std::string& v, const std::string& k) { cfg.seed = as_u64(v, k); }},
      {"lambda-max", [&](const std::string& v, const std::string& k) { cfg.lambda_max = as_double(v, k); }},
      {"eps-den", [&](const std::string& v, const std::string& k) { cfg.eps_den = as_double(v, k); }},
      {"lambda-norm-averaging", [&](const std::string& v, const std::string& k) { cfg.lambda_norm_averaging = as_bool(v, k); }},
      {"sgd", [&](const std::string& v, const std::string& k) { cfg.plain_sgd = as_bool(v, k); }},
      {"weighted-aggregation", [&](const std::string& v, const std::string& k) { cfg.weighted_aggregation = as_bool(v, k); }},
      {"centralized-cold-start", [&](const std::string& v, const std::string& k) { cfg.centralized_cold_start = as_bool(v, k); }},
      {"log-base", [&](const std::string& v, const std::string&) { cfg.log_base = v; }},
      {"workers", [&](const std::string& v, const std::string& k) { cfg.workers = as_int(v, k); }},
      {"cond-window", [&](const std::string& v, const std::string& k) { cfg.cond_window = as_int(v, k); }},
      {"out", [&](const std::string& v, const std::string&) { cfg.out_dir = v; }},
      {"run-id", [&](const std::string& v, const std::string&) { cfg.run_id = v; }},
      {"no-regret", [&](const std::string& v, const std::string& k) { no_regret = as_bool(v, k); }},
  };

  for (const auto& [key, value] : read_key_value_file(path)) {
    const auto it = setters.find(key);
    if (it == setters.end()) {
      throw fedkace::config_error("unknown config key '" + key + "'");
    }
    if (cmd.count("--" + key) > 0) continue;
    it->second(value, key);
  }
}

int do_run(fedkace::ExperimentConfig cfg) {
  const fedkace::PairedRunResult result = fedkace::run_with_regret(cfg);
  const std::filesystem::path dir =
      std::filesystem::path(cfg.out_dir) / cfg.effective_run_id();
  fedkace::write_outputs(dir, result.series, result.summary);
  std::cout << "run " << cfg.effective_run_id()
            << ": AA=" << fedkace::format_g17(result.summary.average_accuracy);
  if (cfg.with_regret) {
    std::cout << " AR=" << fedkace::format_g17(result.summary.average_regret);
  }
  std::cout << " outputs=" << dir.string() << "\n";
  return kExitOk;
}

int do_suite(bool quick, int workers) {
  fedkace::acceptance::Options opts;
  opts.quick = quick;
  opts.workers = workers;
  const std::vector<fedkace::acceptance::CriterionResult> results =
      fedkace::acceptance::run_all(opts);
  fedkace::acceptance::print_results(std::cout, results);
  return fedkace::acceptance::all_passed(results) ? kExitOk : kExitRunFailure;
}

int do_dump_schedule(const fedkace::ExperimentConfig& cfg,
                     const std::string& out_path) {
  cfg.validate();
  std::ostringstream os;
  os << "client,round";
  for (int j = 0; j < cfg.window; ++j) os << ",slot" << j;
  os << "\n";
  const fedkace::ScheduleConfig sched = cfg.schedule();
  for (int k = 0; k < cfg.num_clients; ++k) {
    const auto schedule = fedkace::build_schedule(sched, k);
    for (int t = 1; t <= cfg.rounds; ++t) {
      os << k << ',' << t;
      for (int c : schedule[static_cast<std::size_t>(t - 1)]) os << ',' << c;
      os << "\n";
    }
  }
  if (out_path.empty()) {
    std::cout << os.str();
  } else {
    std::ofstream file(out_path);
    file << os.str();
    if (!file) throw fedkace::io_error("cannot write " + out_path);
  }
  return kExitOk;
}

int do_dump_buffer(const fedkace::ExperimentConfig& cfg, int at_round,
                   const std::string& out_path) {
  cfg.validate();
  const int target = at_round == 0 ? cfg.rounds : at_round;
  if (target < 1 || target > cfg.rounds) {
    throw fedkace::config_error("dump round must lie in [1, rounds]");
  }
  std::ostringstream os;
  os << "round,client,category,sample_id\n";
  fedkace::RunHooks hooks;
  hooks.after_round_client = [&](int round, const fedkace::ClientState& client) {
    if (round == target) {
      fedkace::write_buffer_snapshot(client.buffer, round, client.id, os);
    }
  };
  fedkace::ExperimentConfig capped = cfg;
  capped.rounds = target;  // later rounds cannot change an earlier snapshot
  fedkace::run_experiment(capped, hooks);
  if (out_path.empty()) {
    std::cout << os.str();
  } else {
    std::ofstream file(out_path);
    file << os.str();
    if (!file) throw fedkace::io_error("cannot write " + out_path);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"streaming federated continual learning simulator"};
  app.require_subcommand(1);

  fedkace::ExperimentConfig run_cfg;
  std::string run_method = "fedkace";
  bool no_regret = false;
  CLI::App* run = app.add_subcommand(
      "run", "execute one method and write rounds.csv / summary.json");
  add_experiment_options(*run, run_cfg, run_method);
  run->add_option("-o,--out", run_cfg.out_dir,
                  "output directory (env FEDKACE_OUT)")
      ->default_val(default_out_dir());
  run->add_option("--run-id", run_cfg.run_id,
                  "output subdirectory name (default <method>-s<seed>)");
  run->add_flag("--no-regret", no_regret,
                "skip the paired centralized reference run");
  std::string run_config;
  run->add_option("--config", run_config,
                  "read defaults from a key=value file (flags override)");

  bool suite_quick = false;
  int suite_workers = 1;
  CLI::App* suite =
      app.add_subcommand("suite", "run the acceptance criteria");
  suite->add_flag("--quick", suite_quick,
                  "smaller randomized sweeps, same criteria");
  suite->add_option("--workers", suite_workers, "worker threads")
      ->default_val(suite_workers);

  fedkace::ExperimentConfig sched_cfg;
  std::string sched_method = "fedkace";
  std::string sched_out;
  CLI::App* dump_schedule = app.add_subcommand(
      "dump-schedule", "print each client's category window per round");
  add_experiment_options(*dump_schedule, sched_cfg, sched_method);
  dump_schedule->add_option("-o,--out", sched_out,
                            "write to a file instead of stdout");

  fedkace::ExperimentConfig buf_cfg;
  std::string buf_method = "fedkace";
  std::string buf_out;
  int buf_round = 0;
  CLI::App* dump_buffer = app.add_subcommand(
      "dump-buffer", "run a method and print buffer contents at a round");
  add_experiment_options(*dump_buffer, buf_cfg, buf_method);
  dump_buffer->add_option("--round", buf_round,
                          "round to snapshot (default the final round)");
  dump_buffer->add_option("-o,--out", buf_out,
                          "write to a file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (run->parsed()) {
      if (!run_config.empty()) {
        apply_config_file(*run, run_config, run_cfg, run_method, no_regret);
      }
      run_cfg.method = fedkace::parse_method(run_method);
      run_cfg.with_regret = !no_regret;
      run_cfg.validate();
      return do_run(run_cfg);
    }
    if (suite->parsed()) {
      return do_suite(suite_quick, suite_workers);
    }
    if (dump_schedule->parsed()) {
      sched_cfg.method = fedkace::parse_method(sched_method);
      return do_dump_schedule(sched_cfg, sched_out);
    }
    if (dump_buffer->parsed()) {
      buf_cfg.method = fedkace::parse_method(buf_method);
      return do_dump_buffer(buf_cfg, buf_round, buf_out);
    }
  } catch (const fedkace::config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRunFailure;
  }
  return kExitUsage;
}
