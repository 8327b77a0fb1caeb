#pragma once

#include "magad/graph.hpp"
#include "magad/model.hpp"

namespace magad {

/// D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I. Accepts
/// weighted adjacency (condensed graphs).
inline Matrix normalize_adjacency(const Matrix& A) {
  if (A.rows() != A.cols()) throw DimensionError("normalize_adjacency: not square " + shape_str(A));
  Matrix a = A;
  a.diagonal().array() += 1.0;
  const Eigen::VectorXd inv_sqrt = a.rowwise().sum().array().rsqrt();
  return inv_sqrt.asDiagonal() * a * inv_sqrt.asDiagonal();
}

/// Several graphs packed as one block-diagonal graph.
struct GraphBatch {
  Matrix norm_adjacency;              // block-diagonal, n_total x n_total
  Matrix features;                    // n_total x d
  Matrix readout;                     // B x n_total mean-pooling operator
  std::vector<Eigen::Index> offsets;  // B + 1 node offsets
  GraphList graphs;

  std::size_t size() const { return graphs.size(); }
  Eigen::Index num_nodes() const { return features.rows(); }
};

inline GraphBatch make_batch(const GraphList& graphs) {
  if (graphs.empty()) throw ContractError("make_batch: no graphs");
  GraphBatch b;
  b.graphs = graphs;
  b.offsets.push_back(0);
  const Eigen::Index d = graphs.front()->feature_dim();
  for (const auto* g : graphs) {
    if (g->feature_dim() != d)
      throw DimensionError("make_batch: feature dims differ: " + std::to_string(d) + " vs " + std::to_string(g->feature_dim()));
    b.offsets.push_back(b.offsets.back() + static_cast<Eigen::Index>(g->num_nodes()));
  }
  const Eigen::Index n = b.offsets.back();
  b.norm_adjacency = Matrix::Zero(n, n);
  b.features.resize(n, d);
  b.readout = Matrix::Zero(static_cast<Eigen::Index>(graphs.size()), n);
  for (std::size_t k = 0; k < graphs.size(); ++k) {
    const auto off = b.offsets[k];
    const auto m = static_cast<Eigen::Index>(graphs[k]->num_nodes());
    b.norm_adjacency.block(off, off, m, m) = normalize_adjacency(graphs[k]->adjacency);
    b.features.middleRows(off, m) = graphs[k]->features;
    b.readout.block(static_cast<Eigen::Index>(k), off, 1, m).setConstant(1.0 / static_cast<double>(m));
  }
  return b;
}

struct Embeddings {
  ad::Var Z;   // node embeddings, n_total x h2
  ad::Var zG;  // graph embeddings (mean readout), B x h2
};

/// Two GCN layers, relu after each, then mean readout per graph.
inline Embeddings encode(const ParamVars& p, const GraphBatch& batch, ad::Tape& t) {
  using namespace ad;
  const auto& W1 = p[ParamId::W1];
  if (batch.features.cols() != W1.rows())
    throw DimensionError("encode: feature dim " + std::to_string(batch.features.cols()) + " but W1 is " +
                         shape_str(W1.value()));
  const Var A = t.constant(batch.norm_adjacency);
  const Var X = t.constant(batch.features);
  const Var H1 = relu(matmul(A, matmul(X, W1)));
  const Var Z = relu(matmul(A, matmul(H1, p[ParamId::W2])));
  const Var zG = matmul(t.constant(batch.readout), Z);
  return {Z, zG};
}

inline Embeddings encode(const ParamVars& p, const Graph& g, ad::Tape& t) { return encode(p, make_batch({&g}), t); }

}  // namespace magad
