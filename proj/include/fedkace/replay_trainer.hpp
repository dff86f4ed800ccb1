#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "fedkace/data_stream.hpp"
#include "fedkace/errors.hpp"
#include "fedkace/kernel_buffer.hpp"
#include "fedkace/model.hpp"
#include "fedkace/rng.hpp"

namespace fedkace {

// Replay weight bookkeeping. Per-batch output-layer gradients of the task and
// replay losses are averaged over an epoch; the next epoch's lambda is the
// ratio of their squared norms. By default the gradient VECTORS are averaged
// before taking norms; norm_averaging averages the squared norms instead.
struct ReplayWeightState {
  double lambda = 1.0;
  double eps_den = 1e-12;
  double lambda_max = 1e3;
  bool norm_averaging = false;

  Eigen::VectorXd task_sum, rep_sum;
  double task_sqnorm_sum = 0.0, rep_sqnorm_sum = 0.0;
  long task_batches = 0, rep_batches = 0;

  void start_epoch(Eigen::Index flat_dim) {
    task_sum = Eigen::VectorXd::Zero(flat_dim);
    rep_sum = Eigen::VectorXd::Zero(flat_dim);
    task_sqnorm_sum = rep_sqnorm_sum = 0.0;
    task_batches = rep_batches = 0;
  }

  void accumulate_task(const GradientBundle& g) { accumulate(g, task_sum, task_sqnorm_sum, task_batches); }
  void accumulate_replay(const GradientBundle& g) { accumulate(g, rep_sum, rep_sqnorm_sum, rep_batches); }

 private:
  void accumulate(const GradientBundle& g, Eigen::VectorXd& sum,
                  double& sqnorm_sum, long& batches) {
    const Eigen::Index hn = g.dH.size();
    if (sum.size() != hn + g.dbH.size()) {
      throw contract_error("replay weight accumulator dimension mismatch");
    }
    sum.head(hn) += Eigen::Map<const Eigen::VectorXd>(g.dH.data(), hn);
    sum.tail(g.dbH.size()) += g.dbH;
    sqnorm_sum += g.dH.squaredNorm() + g.dbH.squaredNorm();
    ++batches;
  }
};

// End-of-epoch update. Numerator and denominator are the squared norms of
// the epoch's mean replay and task gradients; the ratio is clamped to
// [0, lambda_max], and a vanishing task gradient saturates at lambda_max.
// Epochs without any replay batch leave lambda unchanged. Returns the pair
// (denominator, numerator) actually used (0,0 when unchanged).
inline std::pair<double, double> update_lambda(ReplayWeightState& st) {
  if (st.task_batches == 0) {
    throw contract_error("update_lambda: no task batches accumulated");
  }
  if (st.rep_batches == 0) {
    st.start_epoch(st.task_sum.size());
    return {0.0, 0.0};
  }
  double num;
  double den;
  if (st.norm_averaging) {
    num = st.rep_sqnorm_sum / static_cast<double>(st.rep_batches);
    den = st.task_sqnorm_sum / static_cast<double>(st.task_batches);
  } else {
    num = (st.rep_sum / static_cast<double>(st.rep_batches)).squaredNorm();
    den = (st.task_sum / static_cast<double>(st.task_batches)).squaredNorm();
  }
  st.lambda = std::clamp(num / std::max(den, st.eps_den), 0.0, st.lambda_max);
  st.start_epoch(st.task_sum.size());
  return {den, num};
}

struct TrainConfig {
  int epochs = 20;
  int batch_size = 32;
  double lr0 = 0.01;
  double weight_decay = 0.001;
  OptimizerKind optimizer = OptimizerKind::adamw;
  std::optional<double> fixed_lambda;  // unset: adaptive; set: pinned
  bool lambda_norm_averaging = false;
  double eps_den = 1e-12;
  double lambda_max = 1e3;

  void validate() const {
    if (epochs < 1) throw config_error("epochs must be >= 1");
    if (batch_size < 1) throw config_error("batch_size must be >= 1");
    if (lr0 <= 0.0) throw config_error("lr0 must be > 0");
    if (weight_decay < 0.0) throw config_error("weight_decay must be >= 0");
    if (eps_den <= 0.0) throw config_error("eps_den must be > 0");
    if (lambda_max <= 0.0) throw config_error("lambda_max must be > 0");
    if (fixed_lambda && (*fixed_lambda < 0.0)) {
      throw config_error("fixed lambda must be >= 0");
    }
  }
};

struct LocalTrainReport {
  ModelParams model;
  std::vector<double> lambda_trace;  // value in effect during each epoch
  std::vector<std::pair<double, double>> lambda_numden;  // (den, num) per epoch
  std::vector<double> task_loss;     // per-epoch mean over batches
  std::vector<double> replay_loss;   // 0 for epochs without replay
};

namespace detail {

// Replay batches cycle through a shuffled order, reshuffling when fewer than
// a full batch remains. A buffer no bigger than the batch size is replayed
// whole every step without consuming randomness.
class ReplayCycler {
 public:
  ReplayCycler(const Buffer& buffer, int batch_size, Rng& rng)
      : batch_size_(static_cast<std::size_t>(batch_size)), rng_(rng) {
    for (const ScoredItem* item : buffer.all_items()) {
      samples_.push_back(&item->sample);
    }
  }

  bool empty() const { return samples_.empty(); }

  std::vector<Sample> next_batch() {
    std::vector<Sample> batch;
    if (samples_.empty()) return batch;
    if (samples_.size() <= batch_size_) {
      batch.reserve(samples_.size());
      for (const Sample* s : samples_) batch.push_back(*s);
      return batch;
    }
    if (pos_ + batch_size_ > order_.size()) reshuffle();
    batch.reserve(batch_size_);
    for (std::size_t i = 0; i < batch_size_; ++i) {
      batch.push_back(*samples_[order_[pos_++]]);
    }
    return batch;
  }

 private:
  void reshuffle() {
    if (order_.size() != samples_.size()) {
      order_.resize(samples_.size());
      for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    }
    rng_.shuffle(order_);
    pos_ = 0;
  }

  std::vector<const Sample*> samples_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;  // order_ starts empty, so the first batch reshuffles
  std::size_t batch_size_;
  Rng& rng_;
};

}  // namespace detail

// One local training round: J epochs of AdamW (cosine schedule) on the round
// task, with a replay term on the old-category buffer weighted by lambda.
// Task batches see the task-window mask; replay batches see the old-category
// mask. The combined step gradient is grad_task + lambda * grad_replay.
inline LocalTrainReport train_round(const ModelParams& start,
                                    const RoundTask& task,
                                    const Buffer& buffer,
                                    const CategoryMask& old_categories,
                                    const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  if (task.samples.empty()) throw contract_error("train_round: empty task");
  const CategoryMask task_mask{task.categories};
  for (const auto& [c, items] : buffer.per_category()) {
    if (!old_categories.contains(c)) {
      throw buffer_corruption_error(
          "train_round: buffered category outside the old-category mask");
    }
  }

  LocalTrainReport report;
  report.model = start;
  OptimizerState opt = OptimizerState::make(start, cfg.optimizer, cfg.lr0,
                                            cfg.weight_decay, cfg.epochs);
  ReplayWeightState weight;
  weight.eps_den = cfg.eps_den;
  weight.lambda_max = cfg.lambda_max;
  weight.norm_averaging = cfg.lambda_norm_averaging;
  if (cfg.fixed_lambda) weight.lambda = *cfg.fixed_lambda;
  const Eigen::Index flat_dim = start.H.size() + start.bH.size();

  detail::ReplayCycler replay(buffer, cfg.batch_size, rng);

  std::vector<std::size_t> task_order(task.samples.size());
  for (std::size_t i = 0; i < task_order.size(); ++i) task_order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    report.lambda_trace.push_back(weight.lambda);
    weight.start_epoch(flat_dim);
    rng.shuffle(task_order);
    double task_loss_sum = 0.0;
    double replay_loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t off = 0; off < task_order.size();
         off += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t len =
          std::min(static_cast<std::size_t>(cfg.batch_size),
                   task_order.size() - off);
      std::vector<Sample> batch;
      batch.reserve(len);
      for (std::size_t i = 0; i < len; ++i) {
        batch.push_back(task.samples[task_order[off + i]]);
      }
      auto [task_loss, grad] = ce_loss_and_grad(report.model, batch, task_mask);
      weight.accumulate_task(grad);
      task_loss_sum += task_loss;
      if (!replay.empty()) {
        const std::vector<Sample> replay_batch = replay.next_batch();
        const auto [replay_loss, replay_grad] =
            ce_loss_and_grad(report.model, replay_batch, old_categories);
        weight.accumulate_replay(replay_grad);
        replay_loss_sum += replay_loss;
        grad.add_scaled(replay_grad, weight.lambda);
      }
      report.model = optimizer_step(opt, report.model, grad, epoch);
      ++batches;
    }
    report.task_loss.push_back(task_loss_sum / static_cast<double>(batches));
    report.replay_loss.push_back(replay_loss_sum /
                                 static_cast<double>(batches));
    if (cfg.fixed_lambda) {
      weight.lambda = *cfg.fixed_lambda;
      report.lambda_numden.emplace_back(0.0, 0.0);
    } else {
      report.lambda_numden.push_back(update_lambda(weight));
    }
  }
  return report;
}

}  // namespace fedkace
