#pragma once

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedkace/errors.hpp"
#include "fedkace/model.hpp"
#include "fedkace/rng.hpp"

namespace fedkace {

// All logs in the selection scores share one base. Natural log by default; a
// base override rescales every log (including the one inside lambda1)
// uniformly, which only rescales scores and never reorders DS-free terms.
struct LogSpec {
  double inv_ln_base = 1.0;

  double log(double x) const { return std::log(x) * inv_ln_base; }

  static LogSpec base(double b) {
    if (b <= 0.0 || b == 1.0) throw config_error("log base must be > 0, != 1");
    return LogSpec{1.0 / std::log(b)};
  }
};

// A buffered sample with its kernel-space embedding: the model's raw logits
// restricted to the active mask (ascending id order), L2-normalized, plus the
// model's probability of the true label. Both are refreshed on every
// maintenance pass, never reused stale.
struct ScoredItem {
  Sample sample;
  Eigen::VectorXd g_hat;
  double p_true = 0.0;
};

inline Eigen::VectorXd normalized_masked_logits(const ModelParams& p,
                                                const Eigen::VectorXd& x,
                                                const CategoryMask& mask) {
  if (mask.empty()) {
    throw invalid_mask_error("normalized_masked_logits: empty mask");
  }
  const Eigen::VectorXd logits = forward(p, x);
  if (mask.max_id() >= logits.size()) {
    throw invalid_mask_error("normalized_masked_logits: mask exceeds outputs");
  }
  Eigen::VectorXd g(static_cast<Eigen::Index>(mask.size()));
  Eigen::Index i = 0;
  for (int c : mask.ids()) g[i++] = logits[c];
  const double norm = g.norm();
  if (norm < 1e-12) {  // numerically zero logit vector; fall back to e1
    g.setZero();
    g[0] = 1.0;
    return g;
  }
  return g / norm;
}

inline ScoredItem score_sample(const ModelParams& p, const Sample& s,
                               const CategoryMask& mask) {
  ScoredItem item;
  item.sample = s;
  const Eigen::VectorXd logits = forward(p, s.features);
  const Eigen::VectorXd probs = masked_softmax(logits, mask);
  if (!mask.contains(s.label)) {
    throw contract_error("score_sample: label outside mask");
  }
  item.p_true = probs[s.label];
  Eigen::VectorXd g(static_cast<Eigen::Index>(mask.size()));
  Eigen::Index i = 0;
  for (int c : mask.ids()) g[i++] = logits[c];
  const double norm = g.norm();
  if (norm < 1e-12) {
    g.setZero();
    g[0] = 1.0;
  } else {
    g /= norm;
  }
  item.g_hat = std::move(g);
  return item;
}

// Replay buffer: per-category item lists plus the owner's seen-category set.
// Items are stored in ascending sample-id order within each category.
class Buffer {
 public:
  Buffer() = default;

  Buffer(int capacity, CategoryMask seen)
      : capacity_(capacity), seen_(std::move(seen)) {
    if (capacity < 0) throw config_error("buffer capacity must be >= 0");
  }

  int capacity() const { return capacity_; }
  const CategoryMask& seen() const { return seen_; }
  bool empty() const { return size_ == 0; }
  std::size_t size() const { return size_; }

  const std::map<int, std::vector<ScoredItem>>& per_category() const {
    return items_;
  }

  std::vector<ScoredItem> items_of(int category) const {
    auto it = items_.find(category);
    return it == items_.end() ? std::vector<ScoredItem>{} : it->second;
  }

  // Flat view in (category, sample id) ascending order.
  std::vector<const ScoredItem*> all_items() const {
    std::vector<const ScoredItem*> out;
    out.reserve(size_);
    for (const auto& [c, items] : items_) {
      for (const ScoredItem& item : items) out.push_back(&item);
    }
    return out;
  }

  void insert_category(int category, std::vector<ScoredItem> items) {
    if (!seen_.contains(category)) {
      throw buffer_corruption_error("buffer insert for unseen category " +
                                    std::to_string(category));
    }
    for (const ScoredItem& item : items) {
      if (item.sample.label != category) {
        throw buffer_corruption_error("buffer item label disagrees with its category slot");
      }
    }
    if (size_ + items.size() > static_cast<std::size_t>(capacity_)) {
      throw buffer_corruption_error("buffer insert exceeds capacity");
    }
    if (items.empty()) return;
    std::sort(items.begin(), items.end(),
              [](const ScoredItem& a, const ScoredItem& b) {
                return a.sample.id < b.sample.id;
              });
    size_ += items.size();
    items_[category] = std::move(items);
  }

 private:
  int capacity_ = 0;
  CategoryMask seen_;
  std::map<int, std::vector<ScoredItem>> items_;
  std::size_t size_ = 0;
};

// Kernel bandwidth beta = |M|^(2/d) for a nonempty reference buffer of size
// |M| and embedding dimension d, else 1.
inline double compute_beta(std::size_t old_buffer_size, int d) {
  if (d < 1) throw config_error("compute_beta: dimension must be >= 1");
  if (old_buffer_size == 0) return 1.0;
  return std::pow(static_cast<double>(old_buffer_size),
                  2.0 / static_cast<double>(d));
}

inline double kernel(const Eigen::VectorXd& g1, const Eigen::VectorXd& g2,
                     double beta) {
  if (g1.size() != g2.size()) {
    throw config_error("kernel: embedding dimensions disagree");
  }
  return std::exp(-beta * (g1 - g2).squaredNorm());
}

// Squared distance to the nearest stored embedding; 0 against an empty
// buffer, so the diversity bonus vanishes exactly when there is no reference.
inline double ds_score(const Eigen::VectorXd& g_hat, const Buffer& reference) {
  if (reference.empty()) return 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& [c, items] : reference.per_category()) {
    for (const ScoredItem& item : items) {
      if (item.g_hat.size() != g_hat.size()) {
        throw config_error("ds_score: embedding dimensions disagree");
      }
      best = std::min(best, (g_hat - item.g_hat).squaredNorm());
    }
  }
  return best;
}

inline double ds_score(const ScoredItem& item, const Buffer& reference) {
  return ds_score(item.g_hat, reference);
}

// Kernel-smoothed predictive of the candidate's true-label probability,
// before and after hypothetically adding the candidate itself:
//   before = sum_i K(x,x_i) p_i / sum_i K(x,x_i),  after = (A + p)/(B + 1).
// Against an empty reference both collapse to the candidate's own p.
inline std::pair<double, double> conditional_predictives(
    const ScoredItem& item, const Buffer& reference, double beta) {
  if (reference.empty()) return {item.p_true, item.p_true};
  double a = 0.0;
  double b = 0.0;
  for (const auto& [c, items] : reference.per_category()) {
    for (const ScoredItem& ref : items) {
      const double w = kernel(item.g_hat, ref.g_hat, beta);
      a += w * ref.p_true;
      b += w;
    }
  }
  if (b <= 0.0) return {item.p_true, item.p_true};  // all weights underflowed
  return {a / b, (a + item.p_true) / (b + 1.0)};
}

// Score weights scale with the reference buffer size: lambda1 = log|M|/sqrt|M|
// and lambda2 = 1/sqrt|M|, both 0 for an empty reference.
inline double lambda1_factor(std::size_t m, const LogSpec& ls = {}) {
  if (m == 0) return 0.0;
  return ls.log(static_cast<double>(m)) / std::sqrt(static_cast<double>(m));
}

inline double lambda2_factor(std::size_t m) {
  if (m == 0) return 0.0;
  return 1.0 / std::sqrt(static_cast<double>(m));
}

// Informativeness. Categories already present in the reference buffer's seen
// set use the kernel predictive; unseen (new) categories use the model's own
// true-label probability. Higher means more surprising.
inline double idv(const ScoredItem& item, const Buffer& reference, double beta,
                  const LogSpec& ls = {}) {
  const bool old_rule = reference.seen().contains(item.sample.label);
  const double ds = ds_score(item, reference);
  const double l1 = lambda1_factor(reference.size(), ls);
  double p = item.p_true;
  if (old_rule) p = conditional_predictives(item, reference, beta).first;
  return -ls.log(std::max(p, kProbFloor)) + l1 * ds;
}

// Contribution: how much the candidate would shift the kernel predictive in
// its own favor, plus a diversity bonus. Exactly 0 for new categories.
inline double cdv(const ScoredItem& item, const Buffer& reference, double beta,
                  const LogSpec& ls = {}) {
  if (!reference.seen().contains(item.sample.label)) return 0.0;
  const auto [before, after] = conditional_predictives(item, reference, beta);
  (void)before;
  const double l2 = lambda2_factor(reference.size());
  const double ds = ds_score(item, reference);
  return ls.log(std::max(item.p_true, kProbFloor)) -
         ls.log(std::max(after, kProbFloor)) + l2 * ds;
}

// Quota law: base Q = floor(M/n) for every category, and the R = M mod n
// categories with the highest average informativeness get one extra slot.
// Ties and categories with no score rank by ascending id.
inline std::map<int, int> allocate_quotas(int capacity,
                                          const std::vector<int>& categories,
                                          const std::map<int, double>& aidv) {
  if (categories.empty()) {
    throw contract_error("allocate_quotas: no categories");
  }
  if (capacity < 0) throw config_error("allocate_quotas: negative capacity");
  const int n = static_cast<int>(categories.size());
  const int base = capacity / n;
  const int extra = capacity % n;
  std::vector<int> order = categories;
  auto score = [&](int c) {
    auto it = aidv.find(c);
    return it == aidv.end() ? -std::numeric_limits<double>::infinity()
                            : it->second;
  };
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const double sa = score(a);
    const double sb = score(b);
    if (sa != sb) return sa > sb;
    return a < b;
  });
  std::map<int, int> quotas;
  for (int c : categories) quotas[c] = base;
  for (int i = 0; i < extra; ++i) quotas[order[static_cast<std::size_t>(i)]]++;
  return quotas;
}

namespace detail {

// Indices of `values`'s top `take` entries, higher first, ties by ascending
// sample id of the corresponding candidate.
inline std::vector<std::size_t> top_by_score(
    const std::vector<ScoredItem>& candidates,
    const std::vector<double>& values, std::size_t take) {
  std::vector<std::size_t> idx(candidates.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return candidates[a].sample.id < candidates[b].sample.id;
  });
  idx.resize(std::min(take, idx.size()));
  return idx;
}

inline std::vector<ScoredItem> by_ascending_id(
    const std::vector<ScoredItem>& candidates,
    std::vector<std::size_t> chosen) {
  std::sort(chosen.begin(), chosen.end(), [&](std::size_t a, std::size_t b) {
    return candidates[a].sample.id < candidates[b].sample.id;
  });
  std::vector<ScoredItem> out;
  out.reserve(chosen.size());
  for (std::size_t i : chosen) out.push_back(candidates[i]);
  return out;
}

}  // namespace detail

// Two-stage selection for a category the reference buffer already covers:
// shortlist the min(2q, n) candidates with the highest informativeness, then
// keep the q with the highest contribution. Deterministic; returns items in
// ascending sample-id order.
inline std::vector<ScoredItem> select_old_category(
    const std::vector<ScoredItem>& candidates, int quota,
    const Buffer& reference, double beta, const LogSpec& ls = {}) {
  if (quota < 0) throw config_error("select_old_category: negative quota");
  if (quota == 0 || candidates.empty()) return {};
  std::vector<double> idvs(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    idvs[i] = idv(candidates[i], reference, beta, ls);
  }
  const std::size_t q = static_cast<std::size_t>(quota);
  std::vector<std::size_t> shortlist =
      detail::top_by_score(candidates, idvs, 2 * q);
  std::vector<ScoredItem> stage1;
  stage1.reserve(shortlist.size());
  for (std::size_t i : shortlist) stage1.push_back(candidates[i]);
  std::vector<double> cdvs(stage1.size());
  for (std::size_t i = 0; i < stage1.size(); ++i) {
    cdvs[i] = cdv(stage1[i], reference, beta, ls);
  }
  return detail::by_ascending_id(stage1, detail::top_by_score(stage1, cdvs, q));
}

// Weighted sampling without replacement for a category the reference buffer
// has not seen: each draw picks proportionally to exp(IDV) over the remaining
// candidates (max-shifted per draw). Candidates are walked in ascending
// sample-id order, one uniform draw per selection. quota >= n short-circuits
// to all candidates and consumes no randomness. Returns ascending id order.
inline std::vector<ScoredItem> select_new_category(
    const std::vector<ScoredItem>& candidates, const std::vector<double>& idvs,
    int quota, Rng& rng) {
  if (quota < 0) throw config_error("select_new_category: negative quota");
  if (idvs.size() != candidates.size()) {
    throw contract_error("select_new_category: score count mismatch");
  }
  if (quota == 0 || candidates.empty()) return {};
  std::vector<std::size_t> remaining(candidates.size());
  for (std::size_t i = 0; i < remaining.size(); ++i) remaining[i] = i;
  std::sort(remaining.begin(), remaining.end(),
            [&](std::size_t a, std::size_t b) {
              return candidates[a].sample.id < candidates[b].sample.id;
            });
  const std::size_t take =
      std::min(static_cast<std::size_t>(quota), candidates.size());
  if (take == candidates.size()) {
    return detail::by_ascending_id(candidates, std::move(remaining));
  }
  std::vector<std::size_t> chosen;
  chosen.reserve(take);
  for (std::size_t k = 0; k < take; ++k) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i : remaining) mx = std::max(mx, idvs[i]);
    double total = 0.0;
    for (std::size_t i : remaining) total += std::exp(idvs[i] - mx);
    const double u = rng.uniform01() * total;
    double cum = 0.0;
    std::size_t pick = remaining.back();
    std::size_t pick_pos = remaining.size() - 1;
    for (std::size_t pos = 0; pos < remaining.size(); ++pos) {
      cum += std::exp(idvs[remaining[pos]] - mx);
      if (cum > u) {
        pick = remaining[pos];
        pick_pos = pos;
        break;
      }
    }
    chosen.push_back(pick);
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(pick_pos));
  }
  return detail::by_ascending_id(candidates, std::move(chosen));
}

enum class SelectionPolicy {
  kernel_two_stage,  // default: two-stage for old categories, weighted for new
  idv_weighted,      // informativeness-weighted sampling for every category
  balanced_random,   // uniform sampling without replacement, equal-score quotas
};

struct MaintenanceInputs {
  const Buffer* old_buffer = nullptr;
  std::span<const Sample> new_data;
  const ModelParams* model = nullptr;
  CategoryMask all_categories;  // every category encountered so far
  int capacity = 0;
};

namespace detail {

// Uniform sampling without replacement via partial Fisher-Yates; take == n
// consumes no randomness, mirroring select_new_category's short-circuit.
inline std::vector<ScoredItem> select_uniform(
    const std::vector<ScoredItem>& candidates, int quota, Rng& rng) {
  if (quota == 0 || candidates.empty()) return {};
  const std::size_t take =
      std::min(static_cast<std::size_t>(quota), candidates.size());
  std::vector<std::size_t> idx(candidates.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (take < candidates.size()) {
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + rng.below(idx.size() - i);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(take);
  }
  return by_ascending_id(candidates, std::move(idx));
}

}  // namespace detail

// One maintenance pass: rescore everything under the current model and the
// full seen-category mask, allocate per-category quotas by average
// informativeness, then select per category (ascending id order, which also
// fixes the order random draws are consumed in). The old buffer acts as the
// kernel reference throughout; its seen set defines which categories count
// as already covered.
inline Buffer maintain(const MaintenanceInputs& in, Rng& rng,
                       SelectionPolicy policy = SelectionPolicy::kernel_two_stage,
                       const LogSpec& ls = {}) {
  if (in.old_buffer == nullptr || in.model == nullptr) {
    throw contract_error("maintain: null buffer or model");
  }
  if (in.all_categories.empty()) {
    throw invalid_mask_error("maintain: empty category set");
  }
  if (!in.all_categories.contains_all(in.old_buffer->seen())) {
    throw buffer_corruption_error(
        "maintain: old buffer covers categories outside the seen set");
  }
  for (const Sample& s : in.new_data) {
    if (!in.all_categories.contains(s.label)) {
      throw contract_error("maintain: new sample label outside seen set");
    }
  }

  const Buffer& old_buf = *in.old_buffer;
  const double beta = compute_beta(
      old_buf.size(), static_cast<int>(in.all_categories.size()));

  // Reference copy of the old buffer with embeddings refreshed under the
  // current model and mask, so candidate and reference dimensions agree.
  Buffer reference(std::max(in.capacity, static_cast<int>(old_buf.size())),
                   old_buf.seen());
  for (const auto& [c, items] : old_buf.per_category()) {
    std::vector<ScoredItem> refreshed;
    refreshed.reserve(items.size());
    for (const ScoredItem& item : items) {
      refreshed.push_back(
          score_sample(*in.model, item.sample, in.all_categories));
    }
    reference.insert_category(c, std::move(refreshed));
  }

  // Candidate pool per category: surviving old items plus this round's data.
  std::map<int, std::vector<ScoredItem>> pool;
  for (int c : in.all_categories.ids()) pool[c];
  for (const auto& [c, items] : reference.per_category()) {
    pool[c].insert(pool[c].end(), items.begin(), items.end());
  }
  for (const Sample& s : in.new_data) {
    pool[s.label].push_back(score_sample(*in.model, s, in.all_categories));
  }
  for (auto& [c, items] : pool) {
    std::sort(items.begin(), items.end(),
              [](const ScoredItem& a, const ScoredItem& b) {
                return a.sample.id < b.sample.id;
              });
  }

  std::map<int, std::vector<double>> pool_idv;
  std::map<int, double> aidv;
  if (policy != SelectionPolicy::balanced_random) {
    for (const auto& [c, items] : pool) {
      std::vector<double>& scores = pool_idv[c];
      scores.resize(items.size());
      double sum = 0.0;
      for (std::size_t i = 0; i < items.size(); ++i) {
        scores[i] = idv(items[i], reference, beta, ls);
        sum += scores[i];
      }
      if (!items.empty()) {
        aidv[c] = sum / static_cast<double>(items.size());
      }
    }
  }

  const std::map<int, int> quotas =
      allocate_quotas(in.capacity, in.all_categories.ids(), aidv);

  Buffer next(in.capacity, in.all_categories);
  for (int c : in.all_categories.ids()) {
    const std::vector<ScoredItem>& candidates = pool[c];
    const int quota = quotas.at(c);
    std::vector<ScoredItem> picked;
    switch (policy) {
      case SelectionPolicy::kernel_two_stage:
        if (old_buf.seen().contains(c)) {
          picked = select_old_category(candidates, quota, reference, beta, ls);
        } else {
          picked = select_new_category(candidates, pool_idv[c], quota, rng);
        }
        break;
      case SelectionPolicy::idv_weighted:
        picked = select_new_category(candidates, pool_idv[c], quota, rng);
        break;
      case SelectionPolicy::balanced_random:
        picked = detail::select_uniform(candidates, quota, rng);
        break;
    }
    next.insert_category(c, std::move(picked));
  }
  return next;
}

// Spectral conditioning of the buffer's kernel Gram matrix; the smallest
// eigenvalue is floored at 1e-12 so a numerically singular Gram matrix
// reports a large finite value instead of infinity.
inline double condition_number(const Buffer& buffer, double beta) {
  if (buffer.empty()) {
    throw contract_error("condition_number: empty buffer");
  }
  const std::vector<const ScoredItem*> items = buffer.all_items();
  const Eigen::Index n = static_cast<Eigen::Index>(items.size());
  Eigen::MatrixXd gram(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    gram(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double k = kernel(items[static_cast<std::size_t>(i)]->g_hat,
                              items[static_cast<std::size_t>(j)]->g_hat, beta);
      gram(i, j) = k;
      gram(j, i) = k;
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver;
  solver.compute(gram, Eigen::EigenvaluesOnly);
  const double lo = solver.eigenvalues()(0);
  const double hi = solver.eigenvalues()(n - 1);
  return hi / std::max(lo, 1e-12);
}

// Snapshot line format: round,client,category,sample_id.
inline void write_buffer_snapshot(const Buffer& buffer, int round, int client,
                                  std::ostream& os) {
  for (const auto& [c, items] : buffer.per_category()) {
    for (const ScoredItem& item : items) {
      os << round << ',' << client << ',' << c << ',' << item.sample.id
         << "\n";
    }
  }
  if (!os) throw io_error("write_buffer_snapshot: write failed");
}

}  // namespace fedkace
