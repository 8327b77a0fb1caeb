#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "magad/error.hpp"
#include "magad/scoring.hpp"

namespace magad {

/// Probability that a random positive outranks a random negative, ties
/// counted one half. Computed from average ranks in O(n log n).
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw DimensionError("roc_auc: " + std::to_string(scores.size()) + " scores but " + std::to_string(labels.size()) +
                         " labels");
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ArgumentError("roc_auc: labels must be 0 or 1");
    if (!std::isfinite(scores[i])) throw ArgumentError("roc_auc: non-finite score at " + std::to_string(i));
    n_pos += static_cast<std::size_t>(labels[i]);
  }
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw MetricError("roc_auc: undefined with a single class present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // twice the rank sum of positives keeps tied (half-integer) ranks integral
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t pos_in_run = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) pos_in_run += static_cast<std::size_t>(labels[order[j++]]);
    // ranks i+1 .. j share the average (i + 1 + j) / 2
    twice_rank_sum += pos_in_run * (i + 1 + j);
    i = j;
  }
  const std::uint64_t twice_u = twice_rank_sum - n_pos * (n_pos + 1);
  const std::uint64_t twice_pairs = 2 * static_cast<std::uint64_t>(n_pos) * n_neg;
  // both counts are exact integers, so this is the correctly rounded ratio and
  // auc(s, y) + auc(s, 1 - y) comes out as exactly one
  return static_cast<double>(twice_u) / static_cast<double>(twice_pairs);
}

inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  return roc_auc(std::span<const double>(scores), std::span<const int>(labels));
}

struct EvalResult {
  double auc = 0.0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  std::vector<double> per_seed;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single seed
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  if (xs.empty()) throw ArgumentError("mean_std: no values");
  MeanStd r;
  r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

/// Folds per-seed results into one: auc and counts of the first seed are
/// kept, per_seed collects every auc.
inline EvalResult aggregate(const std::vector<EvalResult>& runs) {
  if (runs.empty()) throw ArgumentError("aggregate: no runs");
  EvalResult out = runs.front();
  out.per_seed.clear();
  for (const auto& r : runs) out.per_seed.push_back(r.auc);
  const auto ms = mean_std(out.per_seed);
  out.mean = ms.mean;
  out.std = ms.std;
  return out;
}

/// Average ranks (1-based), ties sharing the mean of their positions.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> rank(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && x[order[j]] == x[order[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) rank[order[k]] = 0.5 * static_cast<double>(i + 1 + j);
    i = j;
  }
  return rank;
}

/// Spearman rank correlation: Pearson correlation of average ranks.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DimensionError("spearman: length mismatch");
  if (x.size() < 2) throw MetricError("spearman: needs at least two points");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / static_cast<double>(rx.size());
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / static_cast<double>(ry.size());
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw MetricError("spearman: undefined for a constant sequence");
  return sxy / std::sqrt(sxx * syy);
}

/// Scores and ground-truth labels at the task's granularity: one entry per
/// graph, or one per node pooled across graphs.
struct ScoredLabels {
  std::vector<double> scores;
  std::vector<int> labels;
};

inline ScoredLabels collect_scores(const ModelParams& theta, const GraphList& test, Task task) {
  if (test.empty()) throw ContractError("evaluate: empty test set");
  if (task == Task::Subgraph)
    for (const auto* g : test)
      if (!g->has_node_mask()) throw ContractError("evaluate: graph " + std::to_string(g->id) + " has no node anomaly mask");
  ScoredLabels out;
  for (const auto& r : score_graphs(theta, test)) {
    if (task == Task::Graph) {
      out.scores.push_back(r.graph_score);
      out.labels.push_back(r.graph_label);
    } else {
      out.scores.insert(out.scores.end(), r.node_scores.begin(), r.node_scores.end());
      out.labels.insert(out.labels.end(), r.node_labels.begin(), r.node_labels.end());
    }
  }
  return out;
}

inline EvalResult evaluate_scores(const ScoredLabels& s) {
  EvalResult r;
  r.auc = roc_auc(s.scores, s.labels);
  r.n_pos = static_cast<std::size_t>(std::count(s.labels.begin(), s.labels.end(), 1));
  r.n_neg = s.labels.size() - r.n_pos;
  r.per_seed = {r.auc};
  r.mean = r.auc;
  return r;
}

/// Graph task: graph scores against graph labels. Subgraph task: node
/// scores against node masks. Ground-truth labels are used, so training
/// contamination never leaks into evaluation.
inline EvalResult evaluate(const ModelParams& theta, const GraphList& test, Task task) {
  return evaluate_scores(collect_scores(theta, test, task));
}

}  // namespace magad
