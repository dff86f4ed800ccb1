#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedkace/config.hpp"
#include "fedkace/data_stream.hpp"
#include "fedkace/errors.hpp"
#include "fedkace/kernel_buffer.hpp"
#include "fedkace/metrics.hpp"
#include "fedkace/model.hpp"
#include "fedkace/replay_trainer.hpp"
#include "fedkace/rng.hpp"
#include "fedkace/switch_monitor.hpp"

namespace fedkace {

// What a protocol variant keeps, drops, or forces. All variants share the
// same round loop; these switches select the differing pieces.
struct VariantTraits {
  bool uses_buffer = true;
  SelectionPolicy buffer_policy = SelectionPolicy::kernel_two_stage;
  bool adaptive_lambda = true;
  bool aggregates = true;           // server-side averaging happens
  bool weighted_aggregation = false;
  bool identity_aggregation = false;  // "shared" model is the client's own
  bool runs_monitor = true;
  SwitchRule switch_rule = SwitchRule::two_consecutive;
  InferencePolicy inference = InferencePolicy::switch_based;
  bool centralized = false;
};

inline VariantTraits variant_traits(MethodVariant m,
                                    const ExperimentConfig& cfg) {
  VariantTraits t;
  t.weighted_aggregation = cfg.weighted_aggregation;
  switch (m) {
    case MethodVariant::fedkace:
      break;
    case MethodVariant::fedavg:
      t.uses_buffer = false;
      t.weighted_aggregation = true;
      t.runs_monitor = false;
      t.inference = InferencePolicy::always_global;
      break;
    case MethodVariant::localkace:
      t.aggregates = false;
      t.identity_aggregation = true;
      break;
    case MethodVariant::centralized:
      t.uses_buffer = false;
      t.aggregates = false;
      t.runs_monitor = false;
      t.inference = InferencePolicy::own_model;
      t.centralized = true;
      break;
    case MethodVariant::as1:
      t.switch_rule = SwitchRule::single_drop;
      break;
    case MethodVariant::as2:
      t.inference = InferencePolicy::always_global;
      break;
    case MethodVariant::as3:
      t.inference = InferencePolicy::always_local;
      break;
    case MethodVariant::as4:
      t.adaptive_lambda = false;
      break;
    case MethodVariant::as5:
      t.buffer_policy = SelectionPolicy::idv_weighted;
      break;
    case MethodVariant::as6:
      t.buffer_policy = SelectionPolicy::balanced_random;
      break;
    case MethodVariant::as7:
      t.adaptive_lambda = false;
      t.buffer_policy = SelectionPolicy::balanced_random;
      break;
  }
  return t;
}

struct ClientState {
  int id = 0;
  ModelParams local_model;
  Buffer buffer;
  CategoryMask seen;
  GapMonitorState monitor;
  std::vector<std::vector<int>> schedule;
  std::vector<Sample> cumulative_data;  // centralized reference only
  std::vector<double> last_lambda_trace;
};

struct ExperimentState {
  ModelParams initial_model;
  ModelParams global_model;
  int rounds_done = 0;
  std::vector<ClientState> clients;
  ScheduleConfig sched;
};

namespace detail {

inline void parallel_for(int workers, std::size_t n,
                         const std::function<void(std::size_t)>& fn) {
  const std::size_t nw =
      std::min(static_cast<std::size_t>(std::max(workers, 1)), n);
  if (nw <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr first_error;
  std::vector<std::thread> pool;
  pool.reserve(nw);
  for (std::size_t w = 0; w < nw; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          const std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (std::thread& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

inline ExperimentState init_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentState st;
  st.sched = cfg.schedule();
  Rng init_rng(stream_seed(cfg.seed, stream_tag::model_init));
  st.initial_model = ModelParams::init_random(cfg.feature_dim, cfg.hidden_dim,
                                              cfg.c_max, init_rng);
  st.global_model = st.initial_model;
  st.clients.resize(static_cast<std::size_t>(cfg.num_clients));
  for (int k = 0; k < cfg.num_clients; ++k) {
    ClientState& client = st.clients[static_cast<std::size_t>(k)];
    client.id = k;
    client.local_model = st.initial_model;
    client.buffer = Buffer(cfg.buffer_capacity, CategoryMask{});
    client.schedule = build_schedule(st.sched, k);
  }
  return st;
}

// One federated round: every client trains locally (task + weighted replay),
// refreshes its buffer, the server aggregates, and each client then checks
// its switch monitor against the fresh shared model and reports metrics on
// the test set of everything it has seen. Clients are independent within a
// round; each owns private random streams keyed by (seed, role, client,
// round), so the worker count never changes results.
inline RoundMetrics run_round(ExperimentState& st, int t,
                              const ExperimentConfig& cfg,
                              const VariantTraits& traits) {
  if (t != st.rounds_done + 1) {
    throw contract_error("run_round: rounds must advance one at a time");
  }
  const std::size_t n_clients = st.clients.size();
  std::vector<std::size_t> round_sizes(n_clients, 0);

  TrainConfig tc = cfg.train();
  if (!traits.adaptive_lambda) tc.fixed_lambda = 1.0;
  const LogSpec ls = cfg.log_spec();

  detail::parallel_for(cfg.workers, n_clients, [&](std::size_t ki) {
    ClientState& client = st.clients[ki];
    try {
      const std::vector<int>& window =
          client.schedule[static_cast<std::size_t>(t - 1)];
      RoundTask task = draw_round_data(st.sched, client.id, t, window);
      round_sizes[ki] = task.samples.size();
      const CategoryMask old_seen = client.seen;
      const CategoryMask new_seen = old_seen.united(CategoryMask{window});

      const ModelParams& start =
          traits.centralized
              ? (cfg.centralized_cold_start ? st.initial_model
                                            : client.local_model)
              : (traits.aggregates ? st.global_model : client.local_model);

      Rng train_rng(stream_seed(cfg.seed, stream_tag::batch_shuffle,
                                static_cast<std::uint64_t>(client.id),
                                static_cast<std::uint64_t>(t)));
      LocalTrainReport report;
      if (traits.centralized) {
        client.cumulative_data.insert(client.cumulative_data.end(),
                                      task.samples.begin(),
                                      task.samples.end());
        RoundTask cumulative;
        cumulative.client = client.id;
        cumulative.round = t;
        cumulative.categories = new_seen.ids();
        cumulative.samples = client.cumulative_data;
        report = train_round(start, cumulative, Buffer{}, CategoryMask{}, tc,
                             train_rng);
      } else if (!traits.uses_buffer) {
        report =
            train_round(start, task, Buffer{}, CategoryMask{}, tc, train_rng);
      } else {
        report =
            train_round(start, task, client.buffer, old_seen, tc, train_rng);
      }
      client.local_model = std::move(report.model);
      client.last_lambda_trace = std::move(report.lambda_trace);

      if (traits.uses_buffer) {
        Rng buffer_rng(stream_seed(cfg.seed, stream_tag::buffer_sampling,
                                   static_cast<std::uint64_t>(client.id),
                                   static_cast<std::uint64_t>(t)));
        MaintenanceInputs inputs;
        inputs.old_buffer = &client.buffer;
        inputs.new_data = task.samples;
        inputs.model = &client.local_model;
        inputs.all_categories = new_seen;
        inputs.capacity = cfg.buffer_capacity;
        client.buffer =
            maintain(inputs, buffer_rng, traits.buffer_policy, ls);
      }
      client.seen = new_seen;
    } catch (const divergence_error& e) {
      throw divergence_error("client " + std::to_string(client.id) +
                             ", round " + std::to_string(t) + ": " + e.what());
    }
  });

  if (traits.aggregates) {
    std::vector<ModelParams> models;
    models.reserve(n_clients);
    for (const ClientState& client : st.clients) {
      models.push_back(client.local_model);
    }
    if (traits.weighted_aggregation) {
      std::vector<double> weights(n_clients);
      for (std::size_t ki = 0; ki < n_clients; ++ki) {
        weights[ki] = static_cast<double>(round_sizes[ki]);
      }
      st.global_model = params_weighted_average(models, weights);
    } else {
      st.global_model = params_average(models);
    }
  }

  RoundMetrics metrics;
  metrics.round = t;
  metrics.clients.resize(n_clients);
  detail::parallel_for(cfg.workers, n_clients, [&](std::size_t ki) {
    ClientState& client = st.clients[ki];
    const ModelParams& shared =
        traits.identity_aggregation ? client.local_model : st.global_model;

    if (traits.runs_monitor && !client.monitor.switched &&
        !client.buffer.empty()) {
      const GapEvaluation ge = evaluate_gap(shared, client.buffer, client.seen);
      observe(client.monitor, t, ge.gap, traits.switch_rule);
    }

    const ModelParams& inference = inference_model(
        client.monitor, client.local_model, shared, traits.inference);
    const std::vector<Sample> tests = test_set(st.sched, client.seen.ids());

    ClientRoundMetrics& m = metrics.clients[ki];
    m.client = client.id;
    m.accuracy = eval_accuracy(inference, client.seen, tests);
    m.switched = client.monitor.switched;
    m.buffer_size = static_cast<int>(client.buffer.size());
    m.seen_categories = static_cast<int>(client.seen.size());
    if (traits.uses_buffer && !client.buffer.empty()) {
      const double beta = compute_beta(
          client.buffer.size(), static_cast<int>(client.seen.size()));
      m.buffer_cond = condition_number(client.buffer, beta);
    }
    double lambda_sum = 0.0;
    for (double v : client.last_lambda_trace) lambda_sum += v;
    m.lambda_mean = client.last_lambda_trace.empty()
                        ? 1.0
                        : lambda_sum / static_cast<double>(
                                           client.last_lambda_trace.size());
  });

  st.rounds_done = t;
  return metrics;
}

struct RunHooks {
  // Called serially after each round, clients in ascending id order.
  std::function<void(int round, const ClientState&)> after_round_client;
};

struct ExperimentResult {
  std::vector<RoundMetrics> rounds;
  std::vector<long> switch_rounds;  // per client; -1 means never
  // lambda_traces[t-1][client][epoch-1]: replay weight in effect
  std::vector<std::vector<std::vector<double>>> lambda_traces;
};

inline ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                       const RunHooks& hooks = {}) {
  const VariantTraits traits = variant_traits(cfg.method, cfg);
  ExperimentState st = init_experiment(cfg);
  ExperimentResult result;
  result.rounds.reserve(static_cast<std::size_t>(cfg.rounds));
  for (int t = 1; t <= cfg.rounds; ++t) {
    result.rounds.push_back(run_round(st, t, cfg, traits));
    std::vector<std::vector<double>> traces;
    traces.reserve(st.clients.size());
    for (const ClientState& client : st.clients) {
      traces.push_back(client.last_lambda_trace);
    }
    result.lambda_traces.push_back(std::move(traces));
    if (hooks.after_round_client) {
      for (const ClientState& client : st.clients) {
        hooks.after_round_client(t, client);
      }
    }
  }
  for (const ClientState& client : st.clients) {
    result.switch_rounds.push_back(
        client.monitor.switch_round ? *client.monitor.switch_round : -1);
  }
  return result;
}

struct PairedRunResult {
  std::vector<RunSeries> series;  // reference first when present
  RunSummary summary;
  ExperimentResult method_result;
};

// Runs the requested method, plus the per-client centralized reference when
// regret is wanted, and pairs regret per (round, client). The centralized
// method is its own reference, with zero regret by definition.
inline PairedRunResult run_with_regret(const ExperimentConfig& cfg,
                                       const RunHooks& hooks = {}) {
  cfg.validate();
  PairedRunResult out;
  const VariantTraits traits = variant_traits(cfg.method, cfg);

  std::optional<ExperimentResult> reference;
  if (cfg.with_regret && cfg.method != MethodVariant::centralized) {
    ExperimentConfig ref_cfg = cfg;
    ref_cfg.method = MethodVariant::centralized;
    ref_cfg.run_id.clear();
    reference = run_experiment(ref_cfg);
  }

  out.method_result = run_experiment(cfg, hooks);

  RunSeries method_series;
  method_series.run_id = cfg.effective_run_id();
  method_series.method = method_name(cfg.method);
  method_series.seed = cfg.seed;
  method_series.rounds = out.method_result.rounds;

  if (cfg.method == MethodVariant::centralized) {
    if (cfg.with_regret) {
      for (RoundMetrics& r : method_series.rounds) {
        for (ClientRoundMetrics& c : r.clients) c.regret = 0.0;
      }
    }
  } else if (reference) {
    if (reference->rounds.size() != method_series.rounds.size()) {
      throw contract_error("regret pairing: round counts differ");
    }
    RunSeries ref_series;
    ref_series.run_id = method_name(MethodVariant::centralized) + "-s" +
                        std::to_string(cfg.seed);
    ref_series.method = method_name(MethodVariant::centralized);
    ref_series.seed = cfg.seed;
    ref_series.rounds = reference->rounds;
    for (std::size_t ti = 0; ti < method_series.rounds.size(); ++ti) {
      for (std::size_t ki = 0; ki < method_series.rounds[ti].clients.size();
           ++ki) {
        ClientRoundMetrics& m = method_series.rounds[ti].clients[ki];
        ClientRoundMetrics& ref = ref_series.rounds[ti].clients[ki];
        m.regret = regret(ref.accuracy, m.accuracy);
        ref.regret = 0.0;
      }
    }
    out.series.push_back(std::move(ref_series));
  }

  out.summary = summarize(method_series, cfg.effective_cond_window(),
                          out.method_result.switch_rounds);
  out.summary.config_echo = cfg.echo();
  if (!traits.aggregates) {
    out.summary.aggregation = "none";
  } else if (traits.weighted_aggregation) {
    out.summary.aggregation = "sample-weighted";
  } else {
    out.summary.aggregation = "unweighted";
  }
  out.summary.lambda_averaging =
      cfg.lambda_norm_averaging ? "norm" : "vector";
  out.summary.centralized_start =
      cfg.centralized_cold_start ? "cold" : "warm";
  out.series.push_back(std::move(method_series));
  return out;
}

}  // namespace fedkace
