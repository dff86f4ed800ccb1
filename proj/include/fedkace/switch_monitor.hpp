#pragma once

#include <algorithm>
#include <optional>

#include "fedkace/errors.hpp"
#include "fedkace/kernel_buffer.hpp"
#include "fedkace/model.hpp"

namespace fedkace {

// When the generalization gap of the shared model on the client's own buffer
// shrinks, the shared model has started to fit this client's distribution.
// The default rule asks for two consecutive shrinks; single_drop fires on
// the first one.
enum class SwitchRule { two_consecutive, single_drop };

struct GapEvaluation {
  double accuracy = 0.0;
  double mean_true_prob = 0.0;
  double gap = 0.0;  // max(0, accuracy - mean_true_prob)
};

inline GapEvaluation evaluate_gap(const ModelParams& model,
                                  const Buffer& buffer,
                                  const CategoryMask& seen) {
  if (buffer.empty()) throw contract_error("evaluate_gap: empty buffer");
  if (seen.empty()) throw invalid_mask_error("evaluate_gap: empty mask");
  double correct = 0.0;
  double prob_sum = 0.0;
  std::size_t n = 0;
  for (const auto& [c, items] : buffer.per_category()) {
    for (const ScoredItem& item : items) {
      if (!seen.contains(item.sample.label)) {
        throw buffer_corruption_error("evaluate_gap: buffered label outside mask");
      }
      const Eigen::VectorXd logits = forward(model, item.sample.features);
      const Eigen::VectorXd probs = masked_softmax(logits, seen);
      if (masked_argmax(probs, seen) == item.sample.label) correct += 1.0;
      prob_sum += probs[item.sample.label];
      ++n;
    }
  }
  GapEvaluation ge;
  ge.accuracy = correct / static_cast<double>(n);
  ge.mean_true_prob = prob_sum / static_cast<double>(n);
  ge.gap = std::max(0.0, ge.accuracy - ge.mean_true_prob);
  return ge;
}

// One-way latch per client. Once switched, observations become no-ops, so
// the decision can never revert.
struct GapMonitorState {
  std::optional<double> last_gap;
  bool last_delta_negative = false;
  bool switched = false;
  std::optional<int> switch_round;
};

inline void observe(GapMonitorState& st, int round, double gap,
                    SwitchRule rule = SwitchRule::two_consecutive) {
  if (st.switched) return;
  if (st.last_gap.has_value()) {
    const bool delta_negative = (gap - *st.last_gap) < 0.0;
    const bool fire = rule == SwitchRule::single_drop
                          ? delta_negative
                          : (delta_negative && st.last_delta_negative);
    if (fire) {
      st.switched = true;
      st.switch_round = round;
      return;
    }
    st.last_delta_negative = delta_negative;
  }
  st.last_gap = gap;
}

enum class InferencePolicy {
  switch_based,   // local until the monitor fires, shared afterwards
  always_global,  // shared model regardless of the monitor
  always_local,   // own model regardless of the monitor
  own_model,      // no shared model exists for this variant
};

inline const ModelParams& inference_model(const GapMonitorState& st,
                                          const ModelParams& local,
                                          const ModelParams& global,
                                          InferencePolicy policy) {
  switch (policy) {
    case InferencePolicy::always_global:
      return global;
    case InferencePolicy::always_local:
    case InferencePolicy::own_model:
      return local;
    case InferencePolicy::switch_based:
      break;
  }
  return st.switched ? global : local;
}

}  // namespace fedkace
