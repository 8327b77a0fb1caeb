#pragma once

#include <cmath>
#include <numeric>
#include <string>

#include "magad/graph.hpp"
#include "magad/rng.hpp"

namespace magad {

/// Frozen generator defaults. Node labels are degree buckets, standing in for
/// atom types whose valence tracks degree.
struct SyntheticConfig {
  double noise_edge_ratio = 0.15;  // extra random edges per node, both classes
  int max_degree_label = 5;        // labels are min(degree, max) - 1
};

/// Normal graphs: uniform random recursive tree on `base_size` nodes plus
/// sparse noise edges. Anomalous graphs: the same construction with a clique
/// planted on ceil(base_size / 3) random nodes, which form the node mask.
inline GraphDataset generate_synthetic(std::size_t n_graphs, std::size_t base_size, double anomaly_fraction,
                                       std::uint64_t seed, const SyntheticConfig& cfg = {}) {
  if (!(anomaly_fraction > 0.0 && anomaly_fraction < 1.0))
    throw ArgumentError("generate_synthetic: anomaly_fraction must lie in (0, 1)");
  if (base_size < 6) throw ArgumentError("generate_synthetic: base_size must be >= 6");
  const auto n_anom = static_cast<std::size_t>(std::llround(static_cast<double>(n_graphs) * anomaly_fraction));
  if (n_anom == 0 || n_anom >= n_graphs)
    throw ArgumentError("generate_synthetic: " + std::to_string(n_graphs) + " graphs at fraction " +
                        std::to_string(anomaly_fraction) + " leave a class empty");

  Rng rng(seed);
  std::vector<std::size_t> order(n_graphs);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<char> anomalous(n_graphs, 0);
  for (std::size_t i = 0; i < n_anom; ++i) anomalous[order[i]] = 1;

  const auto n = static_cast<Eigen::Index>(base_size);
  const auto clique = static_cast<std::size_t>((base_size + 2) / 3);
  const auto noise = static_cast<std::size_t>(std::llround(cfg.noise_edge_ratio * static_cast<double>(base_size)));

  GraphDataset ds;
  ds.name = "synthetic";
  ds.graphs.resize(n_graphs);
  for (std::size_t gi = 0; gi < n_graphs; ++gi) {
    Graph& g = ds.graphs[gi];
    g.id = gi;
    g.adjacency = Matrix::Zero(n, n);
    for (Eigen::Index v = 1; v < n; ++v) {
      const auto u = static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(v)));
      g.adjacency(u, v) = g.adjacency(v, u) = 1.0;
    }
    for (std::size_t added = 0; added < noise;) {
      const auto u = static_cast<Eigen::Index>(rng.below(base_size));
      const auto v = static_cast<Eigen::Index>(rng.below(base_size));
      if (u == v || g.adjacency(u, v) != 0.0) continue;
      g.adjacency(u, v) = g.adjacency(v, u) = 1.0;
      ++added;
    }
    g.node_anomaly_mask.assign(base_size, 0);
    if (anomalous[gi]) {
      std::vector<std::size_t> nodes(base_size);
      std::iota(nodes.begin(), nodes.end(), 0);
      rng.shuffle(nodes);
      nodes.resize(clique);
      for (auto a : nodes) {
        g.node_anomaly_mask[a] = 1;
        for (auto b : nodes)
          if (a != b) g.adjacency(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = 1.0;
      }
    }
    g.graph_label = g.true_label = anomalous[gi];
    g.node_labels.resize(base_size);
    for (std::size_t v = 0; v < base_size; ++v) {
      const int deg = static_cast<int>(g.adjacency.row(static_cast<Eigen::Index>(v)).sum() + 0.5);
      g.node_labels[v] = std::min(deg, cfg.max_degree_label + 1) - 1;
    }
  }
  assign_one_hot_features(ds);
  return ds;
}

}  // namespace magad
