#pragma once

#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "magad/gcn.hpp"

namespace magad {

enum class Task { Graph, Subgraph };

inline const char* task_name(Task t) { return t == Task::Graph ? "graph" : "subgraph"; }

inline Task parse_task(const std::string& s) {
  if (s == "graph") return Task::Graph;
  if (s == "subgraph") return Task::Subgraph;
  throw ConfigError("task must be 'graph' or 'subgraph', got '" + s + "'");
}

inline constexpr double kProbClip = 1e-12;

/// Reference distribution for the deviation loss: mean and std of q draws
/// from N(0, 1), fixed for the whole run.
struct DeviationConfig {
  std::size_t q = 5000;
  double mu_ref = 0.0;
  double sigma_ref = 1.0;
  double margin = 5.0;
  std::uint64_t ref_seed = 0;
  bool per_batch_reference = false;  // standardize by the batch's own score statistics instead

  static DeviationConfig from_prior(std::size_t q, double margin, std::uint64_t seed) {
    if (q < 2) throw ArgumentError("DeviationConfig: q must be >= 2");
    Rng rng(seed);
    double sum = 0.0;
    double sq = 0.0;
    for (std::size_t i = 0; i < q; ++i) {
      const double s = rng.normal();
      sum += s;
      sq += s * s;
    }
    DeviationConfig c;
    c.q = q;
    c.margin = margin;
    c.ref_seed = seed;
    c.mu_ref = sum / static_cast<double>(q);
    c.sigma_ref = std::sqrt(std::max(0.0, sq / static_cast<double>(q) - c.mu_ref * c.mu_ref));
    c.validate();
    return c;
  }

  void validate() const {
    if (!(sigma_ref > 0.0)) throw ArgumentError("DeviationConfig: sigma_ref must be positive");
    if (!(margin > 0.0)) throw ArgumentError("DeviationConfig: margin must be positive");
  }
};

inline double deviation(double s, const DeviationConfig& cfg) { return (s - cfg.mu_ref) / cfg.sigma_ref; }

inline double deviation_loss(double s, int y, const DeviationConfig& cfg) {
  const double dev = deviation(s, cfg);
  return (1 - y) * std::abs(dev) + y * std::max(0.0, cfg.margin - dev);
}

/// relu(z W1 + b1) W2 + b2, one score per row of z.
inline ad::Var score_head(const ad::Var& z, const ad::Var& W1, const ad::Var& b1, const ad::Var& W2, const ad::Var& b2) {
  using namespace ad;
  if (z.cols() != W1.rows())
    throw ContractError("score head: embedding " + shape_str(z.value()) + " does not fit weights " + shape_str(W1.value()));
  return add_row(matmul(relu(add_row(matmul(z, W1), b1)), W2), b2);
}

inline ad::Var node_scores(const ParamVars& p, const ad::Var& Z) {
  return score_head(Z, p[ParamId::Wv1], p[ParamId::bv1], p[ParamId::Wv2], p[ParamId::bv2]);
}

inline ad::Var graph_scores(const ParamVars& p, const ad::Var& zG) {
  return score_head(zG, p[ParamId::WG1], p[ParamId::bG1], p[ParamId::WG2], p[ParamId::bG2]);
}

inline Matrix label_column(const std::vector<int>& y) {
  Matrix m(static_cast<Eigen::Index>(y.size()), 1);
  for (std::size_t i = 0; i < y.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = y[i];
  return m;
}

/// Elementwise deviation loss of a score column against 0/1 labels.
inline ad::Var deviation_loss(const ad::Var& scores, const std::vector<int>& y, const DeviationConfig& cfg) {
  using namespace ad;
  Tape& t = *scores.tape;
  if (scores.cols() != 1 || static_cast<std::size_t>(scores.rows()) != y.size())
    throw ContractError("deviation_loss: " + std::to_string(y.size()) + " labels for scores " + shape_str(scores.value()));
  double mu = cfg.mu_ref;
  double sigma = cfg.sigma_ref;
  if (cfg.per_batch_reference && scores.rows() > 1) {
    const auto& s = scores.value();
    mu = s.mean();
    sigma = std::sqrt((s.array() - mu).square().mean());
    if (!(sigma > 0.0)) sigma = cfg.sigma_ref;
  }
  const Var dev = scale(add_scalar(scores, -mu), 1.0 / sigma);
  const Matrix ym = label_column(y);
  const Var pos = t.constant(ym);
  const Var neg = t.constant((1.0 - ym.array()).matrix());
  return add(mul(neg, abs(dev)), mul(pos, relu(add_scalar(scale(dev, -1.0), cfg.margin))));
}

/// Binary cross-entropy of sigmoid(s) against 0/1 labels, with the
/// probability clipped to [1e-12, 1 - 1e-12].
inline ad::Var bce_loss(const ad::Var& logits, const std::vector<int>& y) {
  using namespace ad;
  Tape& t = *logits.tape;
  if (logits.cols() != 1 || static_cast<std::size_t>(logits.rows()) != y.size())
    throw ContractError("bce_loss: " + std::to_string(y.size()) + " labels for logits " + shape_str(logits.value()));
  const Matrix ym = label_column(y);
  // p_true = sigmoid(s) where y = 1 and sigmoid(-s) where y = 0
  const Var signed_logits = mul(logits, t.constant((2.0 * ym.array() - 1.0).matrix()));
  const Var p = sigmoid(signed_logits);
  const Var clipped = scale(max_scalar(scale(max_scalar(p, kProbClip), -1.0), -(1.0 - kProbClip)), -1.0);
  return scale(log(clipped), -1.0);
}

/// Loss of one graph: BCE on the graph score plus mean node deviation loss
/// (graph task), or the mean node deviation loss alone (subgraph task).
inline ad::Var combined_loss(const ad::Var& graph_s, int y_graph, const ad::Var& node_s, const std::vector<int>& y_nodes,
                             const DeviationConfig& cfg, Task task, std::vector<std::string>* warnings = nullptr) {
  using namespace ad;
  const bool has_nodes = node_s.valid() && !y_nodes.empty();
  if (task == Task::Subgraph) {
    if (!has_nodes) throw ContractError("combined_loss: subgraph task needs node scores");
    return scale(sum(deviation_loss(node_s, y_nodes, cfg)), 1.0 / static_cast<double>(y_nodes.size()));
  }
  const Var lg = sum(bce_loss(graph_s, {y_graph}));
  if (!has_nodes) {
    if (warnings) warnings->push_back("combined_loss: empty node list, using the graph term alone");
    return lg;
  }
  return add(lg, scale(sum(deviation_loss(node_s, y_nodes, cfg)), 1.0 / static_cast<double>(y_nodes.size())));
}

/// Mean over the batch of each graph's combined loss.
inline ad::Var batch_loss(const ParamVars& p, const GraphBatch& batch, const DeviationConfig& cfg, Task task, ad::Tape& t) {
  using namespace ad;
  const auto emb = encode(p, batch, t);
  std::vector<int> y_nodes;
  y_nodes.reserve(static_cast<std::size_t>(batch.num_nodes()));
  std::vector<int> y_graphs;
  for (const auto* g : batch.graphs) {
    auto yl = training_node_labels(*g);
    y_nodes.insert(y_nodes.end(), yl.begin(), yl.end());
    y_graphs.push_back(g->graph_label);
  }
  const Var R = t.constant(batch.readout);
  Var per_graph = matmul(R, deviation_loss(node_scores(p, emb.Z), y_nodes, cfg));
  if (task == Task::Graph) per_graph = add(per_graph, bce_loss(graph_scores(p, emb.zG), y_graphs));
  return scale(sum(per_graph), 1.0 / static_cast<double>(batch.size()));
}

inline ad::Var batch_loss(const ParamVars& p, const GraphList& graphs, const DeviationConfig& cfg, Task task, ad::Tape& t) {
  return batch_loss(p, make_batch(graphs), cfg, task, t);
}

/// Scores of one graph.
struct ScoreReport {
  std::size_t graph_id = 0;
  double graph_score = 0.0;
  std::vector<double> node_scores;
  int graph_label = 0;
  std::vector<int> node_labels;
};

/// Score graphs without recording gradients; processed in chunks so the
/// block-diagonal adjacency stays small.
inline std::vector<ScoreReport> score_graphs(const ModelParams& params, const GraphList& graphs, std::size_t chunk = 16) {
  std::vector<ScoreReport> out;
  out.reserve(graphs.size());
  for (std::size_t s = 0; s < graphs.size(); s += chunk) {
    GraphList part(graphs.begin() + static_cast<long>(s), graphs.begin() + static_cast<long>(std::min(graphs.size(), s + chunk)));
    const auto batch = make_batch(part);
    ad::Tape t;
    ParamVars p;
    for (std::size_t i = 0; i < kNumParams; ++i) p[i] = t.constant(params[i]);
    const auto emb = encode(p, batch, t);
    const Matrix sv = node_scores(p, emb.Z).value();
    const Matrix sg = graph_scores(p, emb.zG).value();
    for (std::size_t k = 0; k < part.size(); ++k) {
      ScoreReport r;
      r.graph_id = part[k]->id;
      r.graph_score = sg(static_cast<Eigen::Index>(k), 0);
      r.graph_label = part[k]->true_label;
      const auto off = batch.offsets[k];
      for (auto i = off; i < batch.offsets[k + 1]; ++i) r.node_scores.push_back(sv(i, 0));
      r.node_labels = part[k]->node_anomaly_mask;
      out.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace magad
