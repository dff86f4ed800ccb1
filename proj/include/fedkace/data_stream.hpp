#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "fedkace/errors.hpp"
#include "fedkace/model.hpp"
#include "fedkace/rng.hpp"
#include "fedkace/serialize.hpp"

namespace fedkace {

struct ScheduleConfig {
  int c_max = 20;
  int num_clients = 5;
  int rounds = 30;
  int window = 5;
  int overlap = 2;
  int n_per_cat = 20;
  int n_test_per_cat = 20;
  int feature_dim = 16;
  double noise_sigma = 0.3;
  double separation = 2.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (c_max < 1) throw config_error("c_max must be >= 1");
    if (num_clients < 1) throw config_error("num_clients must be >= 1");
    if (rounds < 0) throw config_error("rounds must be >= 0");
    if (window < 1 || window > c_max) {
      throw config_error("window must satisfy 1 <= window <= c_max");
    }
    if (overlap < 0 || overlap > window) {
      throw config_error("overlap must satisfy 0 <= overlap <= window");
    }
    if (n_per_cat < 0) throw config_error("n_per_cat must be >= 0");
    if (n_test_per_cat < 0) throw config_error("n_test_per_cat must be >= 0");
    if (feature_dim < 1) throw config_error("feature_dim must be >= 1");
    if (noise_sigma < 0.0) throw config_error("noise_sigma must be >= 0");
  }
};

// A client's task sequence walks a private random permutation of the
// category space, so clients see the categories in unrelated orders.
inline std::vector<int> client_permutation(const ScheduleConfig& cfg,
                                           int client) {
  std::vector<int> perm(static_cast<std::size_t>(cfg.c_max));
  for (int c = 0; c < cfg.c_max; ++c) perm[static_cast<std::size_t>(c)] = c;
  Rng rng(stream_seed(cfg.seed, stream_tag::permutation,
                      static_cast<std::uint64_t>(client)));
  rng.shuffle(perm);
  return perm;
}

// Window start for round t (1-based). With overlap < window the start slides
// by (window - overlap) each round; with overlap == window it holds still for
// `window` rounds and then jumps by a full window.
inline int window_start(const ScheduleConfig& cfg, int round) {
  const long t = round - 1;
  long start;
  if (cfg.overlap < cfg.window) {
    start = t * (cfg.window - cfg.overlap);
  } else {
    start = (t / cfg.window) * cfg.window;
  }
  return static_cast<int>(start % cfg.c_max);
}

// Category windows for every round: schedule[t-1] lists the w categories the
// client trains on in round t, in permutation order (wrapping cyclically).
inline std::vector<std::vector<int>> build_schedule(const ScheduleConfig& cfg,
                                                    int client) {
  cfg.validate();
  const std::vector<int> perm = client_permutation(cfg, client);
  std::vector<std::vector<int>> schedule;
  schedule.reserve(static_cast<std::size_t>(cfg.rounds));
  for (int t = 1; t <= cfg.rounds; ++t) {
    const int start = window_start(cfg, t);
    std::vector<int> window(static_cast<std::size_t>(cfg.window));
    for (int i = 0; i < cfg.window; ++i) {
      window[static_cast<std::size_t>(i)] =
          perm[static_cast<std::size_t>((start + i) % cfg.c_max)];
    }
    schedule.push_back(std::move(window));
  }
  return schedule;
}

// Fixed class-conditional mean; categories are isotropic Gaussian blobs.
inline Eigen::VectorXd category_mean(const ScheduleConfig& cfg, int category) {
  Rng rng(stream_seed(cfg.seed, stream_tag::category_means,
                      static_cast<std::uint64_t>(category)));
  Eigen::VectorXd mean(cfg.feature_dim);
  for (int i = 0; i < cfg.feature_dim; ++i) {
    mean[i] = cfg.separation * rng.uniform(-1.0, 1.0);
  }
  return mean;
}

// Sample ids partition a single namespace: every (client, round, slot, index)
// cell owns a distinct id, so stream disjointness is checkable by id alone.
inline std::uint64_t train_sample_id(const ScheduleConfig& cfg, int client,
                                     int round, int slot, int index) {
  const std::uint64_t per_round =
      static_cast<std::uint64_t>(cfg.window) *
      static_cast<std::uint64_t>(cfg.n_per_cat);
  const std::uint64_t per_client =
      static_cast<std::uint64_t>(cfg.rounds) * per_round;
  return static_cast<std::uint64_t>(client) * per_client +
         static_cast<std::uint64_t>(round - 1) * per_round +
         static_cast<std::uint64_t>(slot) *
             static_cast<std::uint64_t>(cfg.n_per_cat) +
         static_cast<std::uint64_t>(index);
}

// Test ids live far above any train id.
constexpr std::uint64_t kTestIdBase = 1ull << 62;

struct RoundTask {
  int client = 0;
  int round = 0;
  std::vector<int> categories;  // window order
  std::vector<Sample> samples;
};

// Fresh draws for one (client, round): n_per_cat samples for each window
// category. Never reuses ids or draws from any other round.
inline RoundTask draw_round_data(const ScheduleConfig& cfg, int client,
                                 int round, const std::vector<int>& window) {
  RoundTask task;
  task.client = client;
  task.round = round;
  task.categories = window;
  task.samples.reserve(window.size() *
                       static_cast<std::size_t>(cfg.n_per_cat));
  for (std::size_t slot = 0; slot < window.size(); ++slot) {
    const int c = window[slot];
    const Eigen::VectorXd mean = category_mean(cfg, c);
    Rng rng(stream_seed(cfg.seed, stream_tag::train_data,
                        static_cast<std::uint64_t>(client),
                        static_cast<std::uint64_t>(round),
                        static_cast<std::uint64_t>(c)));
    for (int i = 0; i < cfg.n_per_cat; ++i) {
      Sample s;
      s.id = train_sample_id(cfg, client, round, static_cast<int>(slot), i);
      s.label = c;
      s.features.resize(cfg.feature_dim);
      for (int j = 0; j < cfg.feature_dim; ++j) {
        s.features[j] = mean[j] + cfg.noise_sigma * rng.normal();
      }
      task.samples.push_back(std::move(s));
    }
  }
  return task;
}

// The fixed held-out set for the requested categories, identical no matter
// when or how often it is asked for.
inline std::vector<Sample> test_set(const ScheduleConfig& cfg,
                                    const std::vector<int>& categories) {
  if (categories.empty()) {
    throw contract_error("test_set: no categories requested");
  }
  std::vector<Sample> out;
  out.reserve(categories.size() * static_cast<std::size_t>(cfg.n_test_per_cat));
  for (int c : categories) {
    const Eigen::VectorXd mean = category_mean(cfg, c);
    Rng rng(stream_seed(cfg.seed, stream_tag::test_data,
                        static_cast<std::uint64_t>(c)));
    for (int i = 0; i < cfg.n_test_per_cat; ++i) {
      Sample s;
      s.id = kTestIdBase + static_cast<std::uint64_t>(c) *
                               static_cast<std::uint64_t>(cfg.n_test_per_cat) +
             static_cast<std::uint64_t>(i);
      s.label = c;
      s.features.resize(cfg.feature_dim);
      for (int j = 0; j < cfg.feature_dim; ++j) {
        s.features[j] = mean[j] + cfg.noise_sigma * rng.normal();
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

// Line format: id,round,label,feat0,...,feat{D-1}; one header line on top.
inline void dump_client_dataset(const ScheduleConfig& cfg, int client,
                                std::ostream& os) {
  os << "id,round,label";
  for (int j = 0; j < cfg.feature_dim; ++j) os << ",feat" << j;
  os << "\n";
  const auto schedule = build_schedule(cfg, client);
  for (int t = 1; t <= cfg.rounds; ++t) {
    const RoundTask task =
        draw_round_data(cfg, client, t, schedule[static_cast<std::size_t>(t - 1)]);
    for (const Sample& s : task.samples) {
      os << s.id << ',' << t << ',' << s.label;
      for (int j = 0; j < cfg.feature_dim; ++j) {
        os << ',' << format_g17(s.features[j]);
      }
      os << "\n";
    }
  }
  if (!os) throw io_error("dump_client_dataset: write failed");
}

// Inverse of dump_client_dataset. Round tasks come back in round order with
// categories recovered as the ascending unique labels of that round.
inline std::vector<RoundTask> load_client_dataset(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) {
    throw io_error("load_client_dataset: missing header line");
  }
  std::map<int, RoundTask> by_round;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() < 4) {
      throw io_error("load_client_dataset: short record at line " +
                     std::to_string(line_no));
    }
    Sample s;
    s.id = std::stoull(cells[0]);
    const int round = std::stoi(cells[1]);
    s.label = std::stoi(cells[2]);
    s.features.resize(static_cast<Eigen::Index>(cells.size()) - 3);
    for (std::size_t j = 3; j < cells.size(); ++j) {
      s.features[static_cast<Eigen::Index>(j - 3)] = std::stod(cells[j]);
    }
    RoundTask& task = by_round[round];
    task.round = round;
    task.samples.push_back(std::move(s));
  }
  std::vector<RoundTask> out;
  out.reserve(by_round.size());
  for (auto& [round, task] : by_round) {
    std::vector<int> labels;
    for (const Sample& s : task.samples) labels.push_back(s.label);
    task.categories = CategoryMask(std::move(labels)).ids();
    out.push_back(std::move(task));
  }
  return out;
}

}  // namespace fedkace
