#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedkace/errors.hpp"
#include "fedkace/rng.hpp"

namespace fedkace {

// Probabilities are floored at this value before entering a log. The gradient
// is left untouched: softmax cross-entropy gradients are bounded already.
constexpr double kProbFloor = 1e-12;

struct Sample {
  std::uint64_t id = 0;
  Eigen::VectorXd features;
  int label = 0;
};

// Sorted, duplicate-free set of active category ids.
class CategoryMask {
 public:
  CategoryMask() = default;

  explicit CategoryMask(std::vector<int> ids) : ids_(std::move(ids)) {
    std::sort(ids_.begin(), ids_.end());
    ids_.erase(std::unique(ids_.begin(), ids_.end()), ids_.end());
    if (!ids_.empty() && ids_.front() < 0) {
      throw invalid_mask_error("category mask contains a negative id");
    }
  }

  static CategoryMask full(int c_max) {
    std::vector<int> ids(static_cast<std::size_t>(c_max));
    for (int c = 0; c < c_max; ++c) ids[static_cast<std::size_t>(c)] = c;
    return CategoryMask(std::move(ids));
  }

  bool empty() const { return ids_.empty(); }
  std::size_t size() const { return ids_.size(); }
  const std::vector<int>& ids() const { return ids_; }
  int max_id() const { return ids_.empty() ? -1 : ids_.back(); }

  bool contains(int c) const {
    return std::binary_search(ids_.begin(), ids_.end(), c);
  }

  CategoryMask united(const CategoryMask& other) const {
    std::vector<int> merged;
    merged.reserve(ids_.size() + other.ids_.size());
    std::set_union(ids_.begin(), ids_.end(), other.ids_.begin(),
                   other.ids_.end(), std::back_inserter(merged));
    CategoryMask out;
    out.ids_ = std::move(merged);
    return out;
  }

  bool contains_all(const CategoryMask& other) const {
    return std::includes(ids_.begin(), ids_.end(), other.ids_.begin(),
                         other.ids_.end());
  }

  bool operator==(const CategoryMask& other) const = default;

 private:
  std::vector<int> ids_;
};

// One hidden tanh layer plus an affine output head with a fixed number of
// rows; rows outside the active mask never influence loss or gradients.
struct ModelParams {
  Eigen::MatrixXd W1;  // hidden_dim x feature_dim
  Eigen::VectorXd b1;  // hidden_dim
  Eigen::MatrixXd H;   // c_max x hidden_dim
  Eigen::VectorXd bH;  // c_max

  int feature_dim() const { return static_cast<int>(W1.cols()); }
  int hidden_dim() const { return static_cast<int>(W1.rows()); }
  int c_max() const { return static_cast<int>(H.rows()); }

  static ModelParams zeros(int feature_dim, int hidden_dim, int c_max) {
    if (feature_dim < 1 || hidden_dim < 1 || c_max < 1) {
      throw config_error("model dimensions must all be >= 1");
    }
    ModelParams p;
    p.W1 = Eigen::MatrixXd::Zero(hidden_dim, feature_dim);
    p.b1 = Eigen::VectorXd::Zero(hidden_dim);
    p.H = Eigen::MatrixXd::Zero(c_max, hidden_dim);
    p.bH = Eigen::VectorXd::Zero(c_max);
    return p;
  }

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
  static ModelParams init_random(int feature_dim, int hidden_dim, int c_max,
                                 Rng& rng) {
    ModelParams p = zeros(feature_dim, hidden_dim, c_max);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(feature_dim));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
    for (int i = 0; i < hidden_dim; ++i) {
      for (int j = 0; j < feature_dim; ++j) p.W1(i, j) = rng.uniform(-s1, s1);
    }
    for (int i = 0; i < c_max; ++i) {
      for (int j = 0; j < hidden_dim; ++j) p.H(i, j) = rng.uniform(-s2, s2);
    }
    return p;
  }

  bool same_shape(const ModelParams& o) const {
    return W1.rows() == o.W1.rows() && W1.cols() == o.W1.cols() &&
           H.rows() == o.H.rows() && H.cols() == o.H.cols();
  }

  bool all_finite() const {
    return W1.allFinite() && b1.allFinite() && H.allFinite() && bH.allFinite();
  }
};

inline Eigen::VectorXd hidden_activation(const ModelParams& p,
                                         const Eigen::VectorXd& x) {
  if (x.size() != p.feature_dim()) {
    throw config_error("feature vector length " + std::to_string(x.size()) +
                       " does not match model feature_dim " +
                       std::to_string(p.feature_dim()));
  }
  return ((p.W1 * x + p.b1).array().tanh()).matrix();
}

// Raw logits over all output rows; masking happens at the softmax.
inline Eigen::VectorXd forward(const ModelParams& p, const Eigen::VectorXd& x) {
  return p.H * hidden_activation(p, x) + p.bH;
}

// Softmax over the active ids only. Inactive entries of the result are
// exactly zero. Max-subtraction keeps the exponentials in range.
inline Eigen::VectorXd masked_softmax(const Eigen::VectorXd& logits,
                                      const CategoryMask& mask) {
  if (mask.empty()) throw invalid_mask_error("masked_softmax: empty mask");
  if (mask.max_id() >= logits.size()) {
    throw invalid_mask_error("masked_softmax: mask id " +
                             std::to_string(mask.max_id()) +
                             " outside logit range " +
                             std::to_string(logits.size()));
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (int c : mask.ids()) mx = std::max(mx, logits[c]);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(logits.size());
  double z = 0.0;
  for (int c : mask.ids()) {
    const double e = std::exp(logits[c] - mx);
    out[c] = e;
    z += e;
  }
  for (int c : mask.ids()) out[c] /= z;
  return out;
}

// Highest-probability active id; ties resolve to the lowest id.
inline int masked_argmax(const Eigen::VectorXd& scores,
                         const CategoryMask& mask) {
  if (mask.empty()) throw invalid_mask_error("masked_argmax: empty mask");
  int best = mask.ids().front();
  for (int c : mask.ids()) {
    if (scores[c] > scores[best]) best = c;
  }
  return best;
}

struct GradientBundle {
  Eigen::MatrixXd dW1;
  Eigen::VectorXd db1;
  Eigen::MatrixXd dH;
  Eigen::VectorXd dbH;

  static GradientBundle zeros_like(const ModelParams& p) {
    GradientBundle g;
    g.dW1 = Eigen::MatrixXd::Zero(p.W1.rows(), p.W1.cols());
    g.db1 = Eigen::VectorXd::Zero(p.b1.size());
    g.dH = Eigen::MatrixXd::Zero(p.H.rows(), p.H.cols());
    g.dbH = Eigen::VectorXd::Zero(p.bH.size());
    return g;
  }

  bool all_finite() const {
    return dW1.allFinite() && db1.allFinite() && dH.allFinite() &&
           dbH.allFinite();
  }

  GradientBundle& add_scaled(const GradientBundle& o, double s) {
    dW1 += s * o.dW1;
    db1 += s * o.db1;
    dH += s * o.dH;
    dbH += s * o.dbH;
    return *this;
  }
};

// Mean cross-entropy over the batch under the masked softmax, with the exact
// analytic gradient. Inactive output rows get exactly zero gradient. When
// output_layer_only is set, dW1 and db1 stay zero and backprop through the
// hidden layer is skipped.
inline std::pair<double, GradientBundle> ce_loss_and_grad(
    const ModelParams& p, std::span<const Sample> batch,
    const CategoryMask& mask, bool output_layer_only = false) {
  if (batch.empty()) throw contract_error("ce_loss_and_grad: empty batch");
  if (mask.empty()) throw invalid_mask_error("ce_loss_and_grad: empty mask");
  if (mask.max_id() >= p.c_max()) {
    throw invalid_mask_error("ce_loss_and_grad: mask exceeds output rows");
  }
  GradientBundle g = GradientBundle::zeros_like(p);
  const double inv = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (const Sample& s : batch) {
    if (!mask.contains(s.label)) {
      throw contract_error("ce_loss_and_grad: label " +
                           std::to_string(s.label) + " outside active mask");
    }
    const Eigen::VectorXd a = hidden_activation(p, s.features);
    const Eigen::VectorXd logits = p.H * a + p.bH;
    Eigen::VectorXd du = masked_softmax(logits, mask);
    loss += -std::log(std::max(du[s.label], kProbFloor)) * inv;
    du[s.label] -= 1.0;
    du *= inv;  // inactive entries stay exactly 0
    g.dH.noalias() += du * a.transpose();
    g.dbH += du;
    if (!output_layer_only) {
      const Eigen::VectorXd da = p.H.transpose() * du;
      const Eigen::VectorXd dz =
          (da.array() * (1.0 - a.array().square())).matrix();
      g.dW1.noalias() += dz * s.features.transpose();
      g.db1 += dz;
    }
  }
  return {loss, g};
}

enum class OptimizerKind { adamw, sgd };

// AdamW with decoupled weight decay; moments are shared across no blocks and
// the step counter advances once per optimizer_step call.
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adamw;
  double lr0 = 0.01;
  double weight_decay = 0.001;
  int total_epochs = 20;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0;

  Eigen::MatrixXd mW1, vW1, mH, vH;
  Eigen::VectorXd mb1, vb1, mbH, vbH;

  static OptimizerState make(const ModelParams& p, OptimizerKind kind,
                             double lr0, double weight_decay,
                             int total_epochs) {
    if (lr0 <= 0.0) throw config_error("optimizer lr0 must be > 0");
    if (weight_decay < 0.0) throw config_error("weight decay must be >= 0");
    if (total_epochs < 1) throw config_error("total_epochs must be >= 1");
    OptimizerState st;
    st.kind = kind;
    st.lr0 = lr0;
    st.weight_decay = weight_decay;
    st.total_epochs = total_epochs;
    st.mW1 = Eigen::MatrixXd::Zero(p.W1.rows(), p.W1.cols());
    st.vW1 = st.mW1;
    st.mb1 = Eigen::VectorXd::Zero(p.b1.size());
    st.vb1 = st.mb1;
    st.mH = Eigen::MatrixXd::Zero(p.H.rows(), p.H.cols());
    st.vH = st.mH;
    st.mbH = Eigen::VectorXd::Zero(p.bH.size());
    st.vbH = st.mbH;
    return st;
  }
};

// Cosine schedule over epochs: full lr0 at epoch 1, ~0 at epoch J.
inline double cosine_lr(double lr0, int epoch_index, int total_epochs) {
  if (epoch_index < 1 || epoch_index > total_epochs) {
    throw contract_error("cosine_lr: epoch index " +
                         std::to_string(epoch_index) + " outside [1, " +
                         std::to_string(total_epochs) + "]");
  }
  const double phase = std::numbers::pi * static_cast<double>(epoch_index - 1) /
                       static_cast<double>(total_epochs);
  return lr0 * (1.0 + std::cos(phase)) / 2.0;
}

inline ModelParams optimizer_step(OptimizerState& st, const ModelParams& p,
                                  const GradientBundle& g, int epoch_index) {
  if (!g.all_finite()) {
    throw divergence_error("optimizer_step: non-finite gradient at step " +
                           std::to_string(st.step_count + 1));
  }
  const double lr = cosine_lr(st.lr0, epoch_index, st.total_epochs);
  ModelParams out = p;
  if (st.kind == OptimizerKind::sgd) {
    out.W1 -= lr * g.dW1 + lr * st.weight_decay * p.W1;
    out.b1 -= lr * g.db1 + lr * st.weight_decay * p.b1;
    out.H -= lr * g.dH + lr * st.weight_decay * p.H;
    out.bH -= lr * g.dbH + lr * st.weight_decay * p.bH;
    ++st.step_count;
    return out;
  }
  const long t = ++st.step_count;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(t));
  auto adamw = [&](auto& m, auto& v, const auto& grad, auto& param) {
    m = st.beta1 * m + (1.0 - st.beta1) * grad;
    v.array() = st.beta2 * v.array() + (1.0 - st.beta2) * grad.array().square();
    param.array() -= lr * (m.array() / bc1) /
                     ((v.array() / bc2).sqrt() + st.eps);
    param -= lr * st.weight_decay * param;
  };
  adamw(st.mW1, st.vW1, g.dW1, out.W1);
  adamw(st.mb1, st.vb1, g.db1, out.b1);
  adamw(st.mH, st.vH, g.dH, out.H);
  adamw(st.mbH, st.vbH, g.dbH, out.bH);
  if (!out.all_finite()) {
    throw divergence_error("optimizer_step: non-finite parameters at step " +
                           std::to_string(st.step_count));
  }
  return out;
}

inline void check_same_shape(const ModelParams& a, const ModelParams& b) {
  if (!a.same_shape(b)) {
    throw config_error("model shapes disagree across participants");
  }
}

// Plain coordinate-wise mean of the participants' parameters.
inline ModelParams params_average(std::span<const ModelParams> models) {
  if (models.empty()) throw config_error("params_average: empty model list");
  ModelParams out = models.front();
  for (std::size_t k = 1; k < models.size(); ++k) {
    check_same_shape(out, models[k]);
    out.W1 += models[k].W1;
    out.b1 += models[k].b1;
    out.H += models[k].H;
    out.bH += models[k].bH;
  }
  const double inv = 1.0 / static_cast<double>(models.size());
  out.W1 *= inv;
  out.b1 *= inv;
  out.H *= inv;
  out.bH *= inv;
  return out;
}

// Convex combination with weights proportional to the given counts.
inline ModelParams params_weighted_average(std::span<const ModelParams> models,
                                           std::span<const double> weights) {
  if (models.empty()) {
    throw config_error("params_weighted_average: empty model list");
  }
  if (models.size() != weights.size()) {
    throw config_error("params_weighted_average: weight count mismatch");
  }
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw config_error("params_weighted_average: negative weight");
    total += w;
  }
  if (total <= 0.0) {
    throw config_error("params_weighted_average: weights sum to zero");
  }
  ModelParams out = ModelParams::zeros(models.front().feature_dim(),
                                       models.front().hidden_dim(),
                                       models.front().c_max());
  for (std::size_t k = 0; k < models.size(); ++k) {
    check_same_shape(out, models[k]);
    const double w = weights[k] / total;
    out.W1 += w * models[k].W1;
    out.b1 += w * models[k].b1;
    out.H += w * models[k].H;
    out.bH += w * models[k].bH;
  }
  return out;
}

}  // namespace fedkace
