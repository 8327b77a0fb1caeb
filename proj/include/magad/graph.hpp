#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "magad/autodiff.hpp"

namespace magad {

/// An attributed graph. The adjacency is 0/1 for ingested graphs and
/// weighted in [0, 1] for condensed ones.
struct Graph {
  Matrix adjacency;
  Matrix features;
  std::vector<int> node_labels;        // empty when absent
  int graph_label = 0;                 // label used for training; 1 = anomalous
  int true_label = 0;                  // ground truth, kept intact under contamination
  std::vector<int> node_anomaly_mask;  // empty when absent
  std::size_t id = 0;                  // position in the source dataset

  std::size_t num_nodes() const { return static_cast<std::size_t>(adjacency.rows()); }
  Eigen::Index feature_dim() const { return features.cols(); }
  bool has_node_labels() const { return !node_labels.empty(); }
  bool has_node_mask() const { return !node_anomaly_mask.empty(); }

  void validate() const {
    const auto n = adjacency.rows();
    if (adjacency.cols() != n) throw ContractError("graph " + std::to_string(id) + ": adjacency not square");
    if (features.rows() != n)
      throw ContractError("graph " + std::to_string(id) + ": feature rows " + std::to_string(features.rows()) +
                          " != node count " + std::to_string(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      if (adjacency(i, i) != 0.0) throw ContractError("graph " + std::to_string(id) + ": nonzero diagonal");
      for (Eigen::Index j = i + 1; j < n; ++j)
        if (adjacency(i, j) != adjacency(j, i)) throw ContractError("graph " + std::to_string(id) + ": asymmetric adjacency");
    }
    if (has_node_mask() && node_anomaly_mask.size() != static_cast<std::size_t>(n))
      throw ContractError("graph " + std::to_string(id) + ": node mask length mismatch");
    if (has_node_labels() && node_labels.size() != static_cast<std::size_t>(n))
      throw ContractError("graph " + std::to_string(id) + ": node label length mismatch");
  }
};

/// Non-owning view of graphs drawn from one or more datasets.
using GraphList = std::vector<const Graph*>;

struct GraphDataset {
  std::string name;
  Eigen::Index feature_dim = 0;
  std::vector<Graph> graphs;

  std::size_t size() const { return graphs.size(); }

  std::size_t num_anomalous() const {
    return static_cast<std::size_t>(
        std::count_if(graphs.begin(), graphs.end(), [](const Graph& g) { return g.graph_label == 1; }));
  }

  double anomaly_ratio() const { return graphs.empty() ? 0.0 : double(num_anomalous()) / double(graphs.size()); }

  GraphList view() const {
    GraphList v;
    v.reserve(graphs.size());
    for (const auto& g : graphs) v.push_back(&g);
    return v;
  }

  GraphList view(const std::vector<std::size_t>& indices) const {
    GraphList v;
    v.reserve(indices.size());
    for (auto i : indices) v.push_back(&graphs.at(i));
    return v;
  }

  void validate() const {
    for (const auto& g : graphs) {
      g.validate();
      if (g.feature_dim() != feature_dim)
        throw ContractError(name + ": graph " + std::to_string(g.id) + " has feature dim " +
                            std::to_string(g.feature_dim()) + ", dataset has " + std::to_string(feature_dim));
    }
  }
};

/// One-hot node features; column index is the label itself when all labels
/// are non-negative, otherwise labels are shifted by the minimum.
inline Matrix one_hot_features(const std::vector<int>& labels, int offset, Eigen::Index dim) {
  Matrix x = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), dim);
  for (std::size_t i = 0; i < labels.size(); ++i) x(static_cast<Eigen::Index>(i), labels[i] - offset) = 1.0;
  return x;
}

/// Constant-1 column plus node degree.
inline Matrix degree_features(const Matrix& adjacency) {
  Matrix x(adjacency.rows(), 2);
  x.col(0).setOnes();
  x.col(1) = adjacency.rowwise().sum();
  return x;
}

/// Recompute one-hot features for a whole dataset from its node labels.
inline void assign_one_hot_features(GraphDataset& ds) {
  int lo = 0;
  int hi = -1;
  bool first = true;
  for (const auto& g : ds.graphs)
    for (int l : g.node_labels) {
      lo = first ? l : std::min(lo, l);
      hi = first ? l : std::max(hi, l);
      first = false;
    }
  const int offset = std::min(lo, 0);
  ds.feature_dim = first ? 0 : hi - offset + 1;
  for (auto& g : ds.graphs) g.features = one_hot_features(g.node_labels, offset, ds.feature_dim);
}

/// Label nodes of attribute-free graphs by degree, capped at `max_label`,
/// so condensation has node classes to match.
inline void assign_degree_labels(GraphDataset& ds, int max_label) {
  for (auto& g : ds.graphs) {
    g.node_labels.resize(g.num_nodes());
    for (std::size_t i = 0; i < g.num_nodes(); ++i) {
      const int deg = static_cast<int>(g.adjacency.row(static_cast<Eigen::Index>(i)).sum() + 0.5);
      g.node_labels[i] = std::min(deg, max_label);
    }
  }
}

/// Zero-pad node features so every dataset shares the widest feature dim.
inline void align_feature_dims(std::vector<GraphDataset*> datasets) {
  Eigen::Index d = 0;
  for (auto* ds : datasets) d = std::max(d, ds->feature_dim);
  for (auto* ds : datasets) {
    if (ds->feature_dim == d) continue;
    for (auto& g : ds->graphs) {
      Matrix x = Matrix::Zero(g.features.rows(), d);
      x.leftCols(g.features.cols()) = g.features;
      g.features = std::move(x);
    }
    ds->feature_dim = d;
  }
}

/// Per-node supervision used for the deviation loss. Nodes of a graph
/// labelled normal are normal; nodes of an anomalous graph follow the node
/// mask when one exists and inherit the graph label otherwise.
inline std::vector<int> training_node_labels(const Graph& g) {
  if (g.graph_label == 0) return std::vector<int>(g.num_nodes(), 0);
  if (g.has_node_mask()) return g.node_anomaly_mask;
  return std::vector<int>(g.num_nodes(), 1);
}

}  // namespace magad
