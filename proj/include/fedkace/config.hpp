#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fedkace/data_stream.hpp"
#include "fedkace/errors.hpp"
#include "fedkace/kernel_buffer.hpp"
#include "fedkace/replay_trainer.hpp"
#include "fedkace/serialize.hpp"

namespace fedkace {

enum class MethodVariant {
  fedkace,
  fedavg,
  localkace,
  centralized,
  as1,  // switch on a single gap drop instead of two consecutive
  as2,  // always infer with the shared model
  as3,  // always infer with the local model
  as4,  // replay weight pinned to 1
  as5,  // buffer selection by informativeness-weighted sampling only
  as6,  // buffer selection by category-balanced uniform sampling
  as7,  // as4 + as6 combined, switching kept
};

inline const std::vector<std::pair<std::string, MethodVariant>>&
method_names() {
  static const std::vector<std::pair<std::string, MethodVariant>> names = {
      {"fedkace", MethodVariant::fedkace},
      {"fedavg", MethodVariant::fedavg},
      {"localkace", MethodVariant::localkace},
      {"centralized", MethodVariant::centralized},
      {"as1", MethodVariant::as1},
      {"as2", MethodVariant::as2},
      {"as3", MethodVariant::as3},
      {"as4", MethodVariant::as4},
      {"as5", MethodVariant::as5},
      {"as6", MethodVariant::as6},
      {"as7", MethodVariant::as7},
  };
  return names;
}

inline std::string method_name(MethodVariant m) {
  for (const auto& [name, variant] : method_names()) {
    if (variant == m) return name;
  }
  throw config_error("unknown method variant");
}

inline MethodVariant parse_method(const std::string& name) {
  for (const auto& [known, variant] : method_names()) {
    if (known == name) return variant;
  }
  throw config_error("unknown method '" + name + "'");
}

struct ExperimentConfig {
  MethodVariant method = MethodVariant::fedkace;
  int num_clients = 5;
  int rounds = 30;
  int c_max = 20;
  int window = 5;
  int overlap = 2;
  int buffer_capacity = 200;
  int epochs = 20;
  int batch_size = 32;
  double lr0 = 0.01;
  double weight_decay = 0.001;
  int feature_dim = 16;
  int hidden_dim = 32;
  int n_per_cat = 20;
  int n_test_per_cat = 20;
  double noise_sigma = 0.3;
  double separation = 2.0;
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  std::string run_id;  // empty: "<method>-s<seed>"

  double lambda_max = 1e3;
  double eps_den = 1e-12;
  bool lambda_norm_averaging = false;
  bool plain_sgd = false;
  bool weighted_aggregation = false;  // fedavg always weights by sample count
  bool centralized_cold_start = false;
  std::string log_base = "e";  // "e", "2" or "10"
  int workers = 1;
  int cond_window = 0;  // 0: use max(1, 3*rounds/4)
  bool with_regret = true;

  void validate() const {
    if (num_clients < 1) throw config_error("clients must be >= 1");
    if (rounds < 0) throw config_error("rounds must be >= 0");
    if (c_max < 1) throw config_error("c-max must be >= 1");
    if (window < 1 || window > c_max) {
      throw config_error("window must satisfy 1 <= window <= c-max");
    }
    if (overlap < 0 || overlap > window) {
      throw config_error("overlap must satisfy 0 <= overlap <= window");
    }
    if (buffer_capacity < 0) throw config_error("buffer must be >= 0");
    if (epochs < 1) throw config_error("epochs must be >= 1");
    if (batch_size < 1) throw config_error("batch must be >= 1");
    if (lr0 <= 0.0) throw config_error("lr0 must be > 0");
    if (weight_decay < 0.0) throw config_error("weight-decay must be >= 0");
    if (feature_dim < 1) throw config_error("feature-dim must be >= 1");
    if (hidden_dim < 1) throw config_error("hidden-dim must be >= 1");
    if (n_per_cat < 1) throw config_error("n-per-cat must be >= 1");
    if (n_test_per_cat < 1) throw config_error("n-test-per-cat must be >= 1");
    if (noise_sigma < 0.0) throw config_error("noise-sigma must be >= 0");
    if (lambda_max <= 0.0) throw config_error("lambda-max must be > 0");
    if (eps_den <= 0.0) throw config_error("eps-den must be > 0");
    if (workers < 1) throw config_error("workers must be >= 1");
    if (cond_window < 0) throw config_error("cond-window must be >= 0");
    if (log_base != "e" && log_base != "2" && log_base != "10") {
      throw config_error("log-base must be one of: e, 2, 10");
    }
  }

  ScheduleConfig schedule() const {
    ScheduleConfig s;
    s.c_max = c_max;
    s.num_clients = num_clients;
    s.rounds = rounds;
    s.window = window;
    s.overlap = overlap;
    s.n_per_cat = n_per_cat;
    s.n_test_per_cat = n_test_per_cat;
    s.feature_dim = feature_dim;
    s.noise_sigma = noise_sigma;
    s.separation = separation;
    s.seed = seed;
    return s;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.lr0 = lr0;
    t.weight_decay = weight_decay;
    t.optimizer = plain_sgd ? OptimizerKind::sgd : OptimizerKind::adamw;
    t.lambda_norm_averaging = lambda_norm_averaging;
    t.eps_den = eps_den;
    t.lambda_max = lambda_max;
    return t;
  }

  LogSpec log_spec() const {
    if (log_base == "2") return LogSpec::base(2.0);
    if (log_base == "10") return LogSpec::base(10.0);
    return LogSpec{};
  }

  std::string effective_run_id() const {
    if (!run_id.empty()) return run_id;
    return method_name(method) + "-s" + std::to_string(seed);
  }

  int effective_cond_window() const {
    if (cond_window > 0) return cond_window;
    return std::max(1, 3 * rounds / 4);
  }

  // Flat key/value echo of every knob, in a fixed order.
  std::vector<std::pair<std::string, std::string>> echo() const {
    std::vector<std::pair<std::string, std::string>> kv;
    kv.emplace_back("method", method_name(method));
    kv.emplace_back("clients", std::to_string(num_clients));
    kv.emplace_back("rounds", std::to_string(rounds));
    kv.emplace_back("c_max", std::to_string(c_max));
    kv.emplace_back("window", std::to_string(window));
    kv.emplace_back("overlap", std::to_string(overlap));
    kv.emplace_back("buffer", std::to_string(buffer_capacity));
    kv.emplace_back("epochs", std::to_string(epochs));
    kv.emplace_back("batch", std::to_string(batch_size));
    kv.emplace_back("lr0", format_g17(lr0));
    kv.emplace_back("weight_decay", format_g17(weight_decay));
    kv.emplace_back("feature_dim", std::to_string(feature_dim));
    kv.emplace_back("hidden_dim", std::to_string(hidden_dim));
    kv.emplace_back("n_per_cat", std::to_string(n_per_cat));
    kv.emplace_back("n_test_per_cat", std::to_string(n_test_per_cat));
    kv.emplace_back("noise_sigma", format_g17(noise_sigma));
    kv.emplace_back("separation", format_g17(separation));
    kv.emplace_back("seed", std::to_string(seed));
    kv.emplace_back("lambda_max", format_g17(lambda_max));
    kv.emplace_back("eps_den", format_g17(eps_den));
    kv.emplace_back("lambda_norm_averaging",
                    lambda_norm_averaging ? "1" : "0");
    kv.emplace_back("plain_sgd", plain_sgd ? "1" : "0");
    kv.emplace_back("weighted_aggregation", weighted_aggregation ? "1" : "0");
    kv.emplace_back("centralized_cold_start",
                    centralized_cold_start ? "1" : "0");
    kv.emplace_back("log_base", log_base);
    kv.emplace_back("workers", std::to_string(workers));
    kv.emplace_back("cond_window", std::to_string(effective_cond_window()));
    kv.emplace_back("with_regret", with_regret ? "1" : "0");
    return kv;
  }
};

}  // namespace fedkace
