#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedkace/config.hpp"
#include "fedkace/errors.hpp"
#include "fedkace/model.hpp"
#include "fedkace/serialize.hpp"

namespace fedkace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

inline double eval_accuracy(const ModelParams& model, const CategoryMask& mask,
                            std::span<const Sample> test) {
  if (test.empty()) throw metric_error("eval_accuracy: empty test set");
  std::size_t correct = 0;
  for (const Sample& s : test) {
    const Eigen::VectorXd logits = forward(model, s.features);
    if (masked_argmax(logits, mask) == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

// Per-round accuracy shortfall against the centralized reference.
inline double regret(double centralized_acc, double method_acc) {
  return centralized_acc - method_acc;
}

struct ClientRoundMetrics {
  int client = 0;
  double accuracy = 0.0;
  double regret = kNaN;  // NaN when no reference run is paired
  double lambda_mean = 1.0;
  bool switched = false;
  int buffer_size = 0;
  double buffer_cond = kNaN;  // NaN for variants without a buffer
  int seen_categories = 0;    // |C^{<=t}|, monotone per client
};

struct RoundMetrics {
  int round = 0;
  std::vector<ClientRoundMetrics> clients;

  double mean_accuracy() const {
    double sum = 0.0;
    for (const auto& c : clients) sum += c.accuracy;
    return sum / static_cast<double>(clients.size());
  }

  double mean_regret() const {
    double sum = 0.0;
    for (const auto& c : clients) sum += c.regret;
    return sum / static_cast<double>(clients.size());
  }
};

struct RunSeries {
  std::string run_id;
  std::string method;
  std::uint64_t seed = 0;
  std::vector<RoundMetrics> rounds;
};

struct RunSummary {
  std::string run_id;
  std::string method;
  std::uint64_t seed = 0;
  int rounds = 0;
  int clients = 0;
  double average_accuracy = kNaN;
  double average_regret = kNaN;
  std::vector<long> switch_rounds;  // per client; -1 means never switched
  // Final-round |C^{<=T}| per client. The sliding window cycles a
  // permutation, so full coverage is reported rather than asserted.
  std::vector<int> seen_categories;
  double buffer_cond_window_mean = kNaN;
  int cond_window = 0;
  std::vector<std::pair<std::string, std::string>> config_echo;
  // Resolved semantics that are not obvious from the knobs alone.
  std::string aggregation = "unweighted";
  std::string lambda_averaging = "vector";
  std::string centralized_start = "warm";
};

// Averages over rounds (and clients within a round). Any unpaired regret
// poisons the average to NaN rather than silently skipping rows. The buffer
// conditioning summary is the mean over the trailing `cond_window` rounds,
// NaN whenever any contributing round lacks a buffer.
inline RunSummary summarize(const RunSeries& series, int cond_window,
                            std::vector<long> switch_rounds) {
  RunSummary s;
  s.run_id = series.run_id;
  s.method = series.method;
  s.seed = series.seed;
  s.rounds = static_cast<int>(series.rounds.size());
  s.clients = series.rounds.empty()
                  ? 0
                  : static_cast<int>(series.rounds.front().clients.size());
  s.switch_rounds = std::move(switch_rounds);
  s.cond_window = cond_window;
  if (series.rounds.empty()) return s;

  for (const ClientRoundMetrics& c : series.rounds.back().clients) {
    s.seen_categories.push_back(c.seen_categories);
  }

  double acc_sum = 0.0;
  double reg_sum = 0.0;
  for (const RoundMetrics& r : series.rounds) {
    acc_sum += r.mean_accuracy();
    reg_sum += r.mean_regret();
  }
  s.average_accuracy = acc_sum / static_cast<double>(series.rounds.size());
  s.average_regret = reg_sum / static_cast<double>(series.rounds.size());

  const int first =
      std::max(0, static_cast<int>(series.rounds.size()) - cond_window);
  double cond_sum = 0.0;
  std::size_t cond_n = 0;
  for (std::size_t i = static_cast<std::size_t>(first);
       i < series.rounds.size(); ++i) {
    for (const ClientRoundMetrics& c : series.rounds[i].clients) {
      cond_sum += c.buffer_cond;
      ++cond_n;
    }
  }
  if (cond_n > 0) {
    s.buffer_cond_window_mean = cond_sum / static_cast<double>(cond_n);
  }
  return s;
}

inline void write_rounds_csv(const std::filesystem::path& file,
                             std::span<const RunSeries> series) {
  std::ofstream os(file);
  if (!os) throw io_error("cannot open " + file.string() + " for writing");
  os << "run_id,method,seed,round,client,acc,regret,lambda_mean,switched,"
        "buffer_size,buffer_cond\n";
  for (const RunSeries& run : series) {
    for (const RoundMetrics& r : run.rounds) {
      for (const ClientRoundMetrics& c : r.clients) {
        os << run.run_id << ',' << run.method << ',' << run.seed << ','
           << r.round << ',' << c.client << ',' << format_g17(c.accuracy)
           << ',' << format_g17(c.regret) << ',' << format_g17(c.lambda_mean)
           << ',' << (c.switched ? 1 : 0) << ',' << c.buffer_size << ','
           << format_g17(c.buffer_cond) << "\n";
      }
    }
  }
  if (!os) throw io_error("write failed on " + file.string());
}

namespace detail {

inline std::string json_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char ch : s) {
    switch (ch) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default: out += ch;
    }
  }
  return out;
}

// JSON has no NaN literal; unpaired metrics serialize as null.
inline std::string json_number(double v) {
  if (std::isnan(v)) return "null";
  if (std::isinf(v)) return v > 0 ? "1e308" : "-1e308";
  return format_g17(v);
}

}  // namespace detail

inline void write_summary_json(const std::filesystem::path& file,
                               const RunSummary& s) {
  std::ofstream os(file);
  if (!os) throw io_error("cannot open " + file.string() + " for writing");
  os << "{\n";
  os << "  \"run_id\": \"" << detail::json_escape(s.run_id) << "\",\n";
  os << "  \"method\": \"" << detail::json_escape(s.method) << "\",\n";
  os << "  \"seed\": " << s.seed << ",\n";
  os << "  \"rounds\": " << s.rounds << ",\n";
  os << "  \"clients\": " << s.clients << ",\n";
  os << "  \"average_accuracy\": " << detail::json_number(s.average_accuracy)
     << ",\n";
  os << "  \"average_regret\": " << detail::json_number(s.average_regret)
     << ",\n";
  os << "  \"switch_rounds\": [";
  for (std::size_t i = 0; i < s.switch_rounds.size(); ++i) {
    if (i) os << ", ";
    os << s.switch_rounds[i];
  }
  os << "],\n";
  os << "  \"seen_categories\": [";
  for (std::size_t i = 0; i < s.seen_categories.size(); ++i) {
    if (i) os << ", ";
    os << s.seen_categories[i];
  }
  os << "],\n";
  os << "  \"buffer_cond_window_mean\": "
     << detail::json_number(s.buffer_cond_window_mean) << ",\n";
  os << "  \"cond_window\": " << s.cond_window << ",\n";
  os << "  \"decisions\": {\n";
  os << "    \"aggregation\": \"" << s.aggregation << "\",\n";
  os << "    \"lambda_averaging\": \"" << s.lambda_averaging << "\",\n";
  os << "    \"centralized_start\": \"" << s.centralized_start << "\"\n";
  os << "  },\n";
  os << "  \"config\": {\n";
  for (std::size_t i = 0; i < s.config_echo.size(); ++i) {
    os << "    \"" << detail::json_escape(s.config_echo[i].first) << "\": \""
       << detail::json_escape(s.config_echo[i].second) << "\"";
    os << (i + 1 < s.config_echo.size() ? ",\n" : "\n");
  }
  os << "  }\n";
  os << "}\n";
  if (!os) throw io_error("write failed on " + file.string());
}

inline void write_outputs(const std::filesystem::path& dir,
                          std::span<const RunSeries> series,
                          const RunSummary& summary) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw io_error("cannot create output directory " + dir.string());
  write_rounds_csv(dir / "rounds.csv", series);
  write_summary_json(dir / "summary.json", summary);
}

}  // namespace fedkace
