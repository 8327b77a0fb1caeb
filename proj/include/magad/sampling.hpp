#pragma once

#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "magad/graph.hpp"
#include "magad/rng.hpp"

namespace magad {

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
  std::vector<std::string> warnings;
};

struct Episode {
  GraphList support;
  GraphList query;
  std::string source;
};

/// Largest-remainder apportionment of `total` items over `fractions`.
/// Ties in the remainder go to the earlier part.
inline std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& fractions) {
  std::vector<std::size_t> counts(fractions.size());
  std::vector<double> rem(fractions.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double exact = fractions[i] * static_cast<double>(total);
    // guard against 0.4 * 100 = 40.00000000000001 style noise
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(fractions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return rem[a] > rem[b] + 1e-12; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++counts[order[k % order.size()]];
  return counts;
}

namespace detail {

/// Indices of `graphs` grouped by training label: [normal, anomalous].
inline std::array<std::vector<std::size_t>, 2> by_class(const GraphList& graphs) {
  std::array<std::vector<std::size_t>, 2> cls;
  for (std::size_t i = 0; i < graphs.size(); ++i) cls[graphs[i]->graph_label == 1 ? 1 : 0].push_back(i);
  return cls;
}

}  // namespace detail

/// Stratified train/validation/test split; each part's per-class count is the
/// largest-remainder share of that class.
inline DatasetSplit split_dataset(const GraphDataset& ds, const std::array<double, 3>& fractions, std::uint64_t seed) {
  if (ds.graphs.empty()) throw ArgumentError("split_dataset: empty dataset");
  double total = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw ArgumentError("split_dataset: negative fraction");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ArgumentError("split_dataset: fractions must sum to 1");

  Rng rng(seed);
  DatasetSplit split;
  std::array<std::vector<std::size_t>*, 3> parts{&split.train, &split.validation, &split.test};
  const auto classes = detail::by_class(ds.view());
  for (std::size_t c = 0; c < 2; ++c) {
    auto idx = classes[c];
    if (idx.empty()) continue;
    if (idx.size() < 3)
      split.warnings.push_back("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                               " graphs, fewer than the 3 splits; assignment is best effort");
    rng.shuffle(idx);
    const auto counts = apportion(idx.size(), {fractions[0], fractions[1], fractions[2]});
    std::size_t off = 0;
    for (std::size_t p = 0; p < 3; ++p) {
      parts[p]->insert(parts[p]->end(), idx.begin() + static_cast<long>(off),
                       idx.begin() + static_cast<long>(off + counts[p]));
      off += counts[p];
    }
  }
  for (auto* p : parts) std::sort(p->begin(), p->end());
  return split;
}

/// Stratified support/query halves of an auxiliary dataset.
inline Episode make_episode(const GraphList& aux, const std::string& source, double support_frac, std::uint64_t seed) {
  if (aux.size() < 2) throw EpisodeError(source + ": episode needs at least 2 graphs");
  if (!(support_frac > 0.0 && support_frac < 1.0)) throw ArgumentError("make_episode: support_frac must lie in (0, 1)");
  auto classes = detail::by_class(aux);
  if (classes[0].empty() || classes[1].empty())
    throw EpisodeError(source + ": auxiliary dataset has a single class (" + std::to_string(classes[0].size()) +
                       " normal, " + std::to_string(classes[1].size()) + " anomalous)");
  Rng rng(seed);
  Episode ep;
  ep.source = source;
  for (auto& idx : classes) {
    rng.shuffle(idx);
    auto counts = apportion(idx.size(), {support_frac, 1.0 - support_frac});
    // both halves see the class whenever it has two members
    if (idx.size() >= 2 && counts[1] == 0) --counts[0], ++counts[1];
    if (idx.size() >= 2 && counts[0] == 0) ++counts[0], --counts[1];
    for (std::size_t i = 0; i < idx.size(); ++i) (i < counts[0] ? ep.support : ep.query).push_back(aux[idx[i]]);
  }
  return ep;
}

inline Episode make_episode(const GraphDataset& aux, double support_frac, std::uint64_t seed) {
  return make_episode(aux.view(), aux.name, support_frac, seed);
}

/// Label noise: flips floor(rate * #normal training graphs) anomalous
/// training graphs to normal. true_label keeps the ground truth.
inline GraphDataset contaminate(const GraphDataset& ds, const std::vector<std::size_t>& train, double rate,
                                std::uint64_t seed) {
  if (!(rate >= 0.0 && rate <= 0.2)) throw ArgumentError("contaminate: rate must lie in [0, 0.2]");
  GraphDataset out = ds;
  std::vector<std::size_t> normals;
  std::vector<std::size_t> anomalies;
  for (auto i : train) (ds.graphs.at(i).graph_label == 1 ? anomalies : normals).push_back(i);
  const auto want = static_cast<std::size_t>(std::floor(rate * static_cast<double>(normals.size()) + 1e-9));
  const auto flips = std::min(want, anomalies.size());
  Rng rng(seed);
  rng.shuffle(anomalies);
  for (std::size_t k = 0; k < flips; ++k) out.graphs[anomalies[k]].graph_label = 0;
  return out;
}

/// Training view with exactly k labeled anomalies; the other anomalies are
/// dropped from the labeled pool.
inline GraphList limit_labeled_anomalies(const GraphList& train, std::size_t k, std::uint64_t seed) {
  if (k < 1) throw ArgumentError("limit_labeled_anomalies: k must be >= 1");
  GraphList normals;
  GraphList anomalies;
  for (const auto* g : train) (g->graph_label == 1 ? anomalies : normals).push_back(g);
  if (k > anomalies.size())
    throw ArgumentError("limit_labeled_anomalies: k=" + std::to_string(k) + " exceeds the " +
                        std::to_string(anomalies.size()) + " available anomalies");
  Rng rng(seed);
  rng.shuffle(anomalies);
  GraphList out = normals;
  out.insert(out.end(), anomalies.begin(), anomalies.begin() + static_cast<long>(k));
  std::sort(out.begin(), out.end(), [](const Graph* a, const Graph* b) { return a->id < b->id; });
  return out;
}

/// A training batch drawn without replacement: up to half labeled anomalies,
/// the rest normals. No graph appears twice in one batch.
inline GraphList sample_batch(const GraphList& pool, std::size_t batch_size, Rng& rng) {
  if (pool.empty()) throw ArgumentError("sample_batch: empty pool");
  auto classes = detail::by_class(pool);
  const std::size_t size = std::min(batch_size, pool.size());
  std::size_t n_anom = std::min(classes[1].size(), std::max<std::size_t>(size / 2, classes[1].empty() ? 0 : 1));
  std::size_t n_norm = std::min(classes[0].size(), size - n_anom);
  n_anom = std::min(classes[1].size(), size - n_norm);
  GraphList batch;
  for (std::size_t c = 0; c < 2; ++c) {
    auto& idx = classes[c];
    const std::size_t take = c == 0 ? n_norm : n_anom;
    // partial Fisher-Yates
    for (std::size_t i = 0; i < take; ++i) {
      std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      batch.push_back(pool[idx[i]]);
    }
  }
  return batch;
}

}  // namespace magad
