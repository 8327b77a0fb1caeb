#pragma once

// Per-graph condensation by gradient matching. Each graph is replaced by a
// smaller synthetic one (X', A' = f_phi(X'), Y') whose training gradients
// for a small node-classification GCN track those of the original graph.

#include <algorithm>
#include <array>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "magad/gcn.hpp"
#include "magad/optim.hpp"
#include "magad/sampling.hpp"

namespace magad {

struct CondenseConfig {
  double r = 0.6;
  int tau1 = 10;
  int tau2 = 10;
  int T = 10;
  double eta = 0.01;
  int n_theta_samples = 3;
  double sigma_sparse = 0.05;
  std::uint64_t seed = 0;
  Eigen::Index hidden = 64;      // width of the matching GCN
  Eigen::Index phi_hidden = 32;  // width of the adjacency MLP
  double lr_features = 0.05;
  double lr_phi = 0.05;
  double tol = 1e-4;  // relative improvement below which optimization stops

  void validate() const {
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("condense: r must be in (0, 1], got " + std::to_string(r));
    if (tau1 < 1 || tau2 < 1 || T < 1 || n_theta_samples < 1)
      throw ConfigError("condense: tau1, tau2, T and n_theta_samples must all be >= 1");
    if (!(eta >= 0.0)) throw ConfigError("condense: eta must be non-negative");
    if (!(sigma_sparse >= 0.0 && sigma_sparse <= 1.0)) throw ConfigError("condense: sigma_sparse must be in [0, 1]");
    if (hidden < 1 || phi_hidden < 1) throw ConfigError("condense: hidden widths must be >= 1");
    if (!(lr_features > 0.0 && lr_phi > 0.0)) throw ConfigError("condense: learning rates must be positive");
  }
};

/// MLP_phi: [x_i; x_j] (2d) -> relu(. W1 + b1) (h) -> . W2 + b2 (1).
struct AdjacencyMlp {
  Matrix W1, b1, W2, b2;

  std::array<Matrix*, 4> slots() { return {&W1, &b1, &W2, &b2}; }
  std::array<const Matrix*, 4> slots() const { return {&W1, &b1, &W2, &b2}; }
};

inline AdjacencyMlp init_adjacency_mlp(Eigen::Index d, Eigen::Index h, Rng& rng) {
  return {glorot(2 * d, h, rng), Matrix::Zero(1, h), glorot(h, 1, rng), Matrix::Zero(1, 1)};
}

using PhiVars = std::array<ad::Var, 4>;

inline PhiVars phi_on_tape(const AdjacencyMlp& phi, ad::Tape& t, bool trainable) {
  PhiVars v;
  auto s = phi.slots();
  for (std::size_t k = 0; k < 4; ++k) v[k] = trainable ? t.param(*s[k]) : t.constant(*s[k]);
  return v;
}

namespace detail {

/// Row i*n + j of S1 X is x_i, of S2 X is x_j.
inline std::pair<Matrix, Matrix> pair_selectors(Eigen::Index n) {
  Matrix s1 = Matrix::Zero(n * n, n);
  Matrix s2 = Matrix::Zero(n * n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      s1(i * n + j, i) = 1.0;
      s2(i * n + j, j) = 1.0;
    }
  return {s1, s2};
}

}  // namespace detail

/// A'_ij = sigmoid((MLP([x_i; x_j]) + MLP([x_j; x_i])) / 2), zero diagonal.
/// The MLP is evaluated once per ordered pair and the n x n result O is
/// combined as (O + O^T) / 2, so A' is symmetric bit for bit.
inline ad::Var synth_adjacency(const ad::Var& Xp, const PhiVars& phi) {
  using namespace ad;
  Tape& t = *Xp.tape;
  const Eigen::Index n = Xp.rows();
  if (n < 2) throw ContractError("synth_adjacency: need at least 2 nodes, got " + std::to_string(n));
  if (phi[0].rows() != 2 * Xp.cols())
    throw DimensionError("synth_adjacency: phi expects input " + std::to_string(phi[0].rows()) + " but features are " +
                         shape_str(Xp.value()));
  const auto [s1, s2] = magad::detail::pair_selectors(n);
  const Var pairs = concat_cols(matmul(t.constant(s1), Xp), matmul(t.constant(s2), Xp));
  const Var hidden = relu(add_row(matmul(pairs, phi[0]), phi[1]));
  const Var o = reshape(add_row(matmul(hidden, phi[2]), phi[3]), n, n);
  Matrix offdiag = Matrix::Ones(n, n);
  offdiag.diagonal().setZero();
  return mul(sigmoid(scale(add(o, transpose(o)), 0.5)), t.constant(offdiag));
}

inline Matrix synth_adjacency(const Matrix& Xp, const AdjacencyMlp& phi) {
  ad::Tape t;
  return synth_adjacency(t.constant(Xp), phi_on_tape(phi, t, false)).value();
}

/// Entries below sigma become exactly zero.
inline Matrix sparsify(const Matrix& Ap, double sigma) {
  return Ap.unaryExpr([sigma](double v) { return v < sigma ? 0.0 : v; });
}

/// Differentiable D^-1/2 (A + I) D^-1/2.
inline ad::Var normalize_adjacency(const ad::Var& A) {
  using namespace ad;
  Tape& t = *A.tape;
  const Eigen::Index n = A.rows();
  const Var a = add(A, t.constant(Matrix::Identity(n, n)));
  const Var dinv = recip(sqrt(sum_cols(a)));
  return mul(mul(a, broadcast_cols(dinv, n)), broadcast_rows(transpose(dinv), n));
}

// ---------------------------------------------------------------------------
// Matching network: a two-layer GCN node classifier, logits = Â relu(Â X W1) W2.

struct MatchingParams {
  Matrix W1, W2;
};

inline MatchingParams init_matching_params(Eigen::Index d, Eigen::Index hidden, Eigen::Index classes, Rng& rng) {
  return {glorot(d, hidden, rng), glorot(hidden, classes, rng)};
}

inline ad::Var matching_logits(const ad::Var& Ahat, const ad::Var& X, const ad::Var& W1, const ad::Var& W2) {
  using namespace ad;
  return matmul(Ahat, matmul(relu(matmul(Ahat, matmul(X, W1))), W2));
}

/// Mean softmax cross-entropy over rows; `cls` holds class indices.
inline ad::Var cross_entropy(const ad::Var& logits, const std::vector<int>& cls) {
  using namespace ad;
  Tape& t = *logits.tape;
  const Eigen::Index n = logits.rows();
  const Eigen::Index c = logits.cols();
  if (static_cast<std::size_t>(n) != cls.size())
    throw ContractError("cross_entropy: " + std::to_string(cls.size()) + " labels for logits " + shape_str(logits.value()));
  Matrix onehot = Matrix::Zero(n, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int k = cls[static_cast<std::size_t>(i)];
    if (k < 0 || k >= c) throw ContractError("cross_entropy: class " + std::to_string(k) + " outside [0, " + std::to_string(c) + ")");
    onehot(i, k) = 1.0;
  }
  // the row max is a constant shift; it changes nothing but the range of exp
  const Matrix shift = logits.value().rowwise().maxCoeff().replicate(1, c);
  const Var s = sub(logits, t.constant(shift));
  const Var lse = log(sum_cols(exp(s)));
  const Var picked = sum_cols(mul(s, t.constant(onehot)));
  return scale(sum(sub(lse, picked)), 1.0 / static_cast<double>(n));
}

/// Node class indices derived from raw node labels: label - offset, with
/// offset = min(0, smallest label) and classes = largest - offset + 1.
struct LabelClasses {
  int offset = 0;
  int count = 0;

  static LabelClasses of(const GraphList& graphs) {
    int lo = 0;
    int hi = -1;
    bool any = false;
    for (const auto* g : graphs)
      for (int l : g->node_labels) {
        lo = std::min(lo, l);
        hi = any ? std::max(hi, l) : l;
        any = true;
      }
    if (!any) return {0, 0};
    return {lo, hi - lo + 1};
  }

  std::vector<int> indices(const std::vector<int>& labels) const {
    std::vector<int> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      out[i] = labels[i] - offset;
      if (out[i] < 0 || out[i] >= count) throw ContractError("node label " + std::to_string(labels[i]) + " outside the class range");
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Gradient-matching distance.

/// Sum over layers and columns of 1 - cos(gK_i, gG_i). A column that is
/// zero in exactly one argument counts 1, zero in both counts 0. The dot
/// product and both squared norms share one summation order, and the cosine
/// is dot / sqrt(|a|^2 |b|^2), so identical columns give exactly 1.
inline double gradient_match_distance(const std::vector<Matrix>& gK, const std::vector<Matrix>& gG) {
  if (gK.size() != gG.size())
    throw ContractError("gradient_match_distance: " + std::to_string(gK.size()) + " vs " + std::to_string(gG.size()) + " layers");
  double d = 0.0;
  for (std::size_t l = 0; l < gK.size(); ++l) {
    const Matrix& a = gK[l];
    const Matrix& b = gG[l];
    if (a.rows() != b.rows() || a.cols() != b.cols())
      throw ContractError("gradient_match_distance: layer " + std::to_string(l) + " shapes " + shape_str(a) + " vs " +
                          shape_str(b));
    for (Eigen::Index i = 0; i < a.cols(); ++i) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (Eigen::Index r = 0; r < a.rows(); ++r) {
        dot += a(r, i) * b(r, i);
        na += a(r, i) * a(r, i);
        nb += b(r, i) * b(r, i);
      }
      if (na == 0.0 || nb == 0.0) {
        d += (na == 0.0 && nb == 0.0) ? 0.0 : 1.0;
        continue;
      }
      d += 1.0 - dot / std::sqrt(na * nb);
    }
  }
  return d;
}

/// Same distance with gK on the tape, differentiable in gK.
inline ad::Var gradient_match_distance(const std::vector<ad::Var>& gK, const std::vector<Matrix>& gG) {
  using namespace ad;
  if (gK.empty() || gK.size() != gG.size())
    throw ContractError("gradient_match_distance: " + std::to_string(gK.size()) + " vs " + std::to_string(gG.size()) + " layers");
  Tape& t = *gK.front().tape;
  Var total;
  double fixed = 0.0;
  for (std::size_t l = 0; l < gK.size(); ++l) {
    const Matrix& g = gG[l];
    const Matrix& k = gK[l].value();
    if (k.rows() != g.rows() || k.cols() != g.cols())
      throw ContractError("gradient_match_distance: layer " + std::to_string(l) + " shapes " + shape_str(k) + " vs " +
                          shape_str(g));
    const Matrix ng2 = g.colwise().squaredNorm();
    Matrix active = Matrix::Zero(1, g.cols());
    for (Eigen::Index i = 0; i < g.cols(); ++i) {
      if (ng2(0, i) > 0.0)
        active(0, i) = 1.0;
      else if (k.col(i).squaredNorm() > 0.0)
        fixed += 1.0;
    }
    const Var dot = sum_rows(mul(gK[l], t.constant(g)));
    const Var nk2 = sum_rows(mul(gK[l], gK[l]));
    // the floor keeps sqrt differentiable at a zero column, where dot is 0 anyway
    const Var denom = sqrt(max_scalar(mul(nk2, t.constant(ng2)), 1e-300));
    const Var cos = mul(mul(dot, recip(denom)), t.constant(active));
    const Var layer = add_scalar(scale(sum(cos), -1.0), active.sum());
    total = total.valid() ? add(total, layer) : layer;
  }
  return add_scalar(total, fixed);
}

// ---------------------------------------------------------------------------

struct CondensedGraph {
  std::size_t source_id = 0;
  Matrix Xp;                              // n' x d
  AdjacencyMlp phi;
  std::vector<int> Yp;                    // raw node labels of the sampled nodes
  std::vector<std::size_t> source_nodes;  // original node each condensed node was initialized from
  double sigma_sparse = 0.05;
  Matrix Ap;                              // sparsify(synth_adjacency(Xp, phi), sigma)
  double initial_distance = 0.0;          // matching objective on the evaluation draws
  double final_distance = 0.0;
  int rounds = 0;                         // theta0 draws consumed before stopping

  std::size_t num_nodes() const { return static_cast<std::size_t>(Xp.rows()); }

  void rebuild_adjacency() { Ap = sparsify(synth_adjacency(Xp, phi), sigma_sparse); }

  /// The condensed graph as a GCN input; graph labels and the node mask
  /// come from `source`, the mask through source_nodes.
  Graph to_graph(const Graph& source) const {
    Graph g;
    g.adjacency = Ap;
    g.features = Xp;
    g.node_labels = Yp;
    g.graph_label = source.graph_label;
    g.true_label = source.true_label;
    g.id = source.id;
    if (source.has_node_mask())
      for (auto s : source_nodes) g.node_anomaly_mask.push_back(source.node_anomaly_mask.at(s));
    return g;
  }
};

inline std::size_t condensed_size(std::size_t n, double r) {
  return std::max<std::size_t>(2, static_cast<std::size_t>(std::floor(r * static_cast<double>(n) + 1e-9)));
}

namespace detail {

/// Fixed data of one condensation problem.
struct MatchProblem {
  Matrix norm_adjacency;  // original graph
  Matrix features;
  std::vector<int> cls;   // original node classes
  std::vector<int> cls_p; // condensed node classes
  Eigen::Index classes = 0;
};

inline std::vector<Matrix> original_gradients(const MatchProblem& P, const MatchingParams& th) {
  ad::Tape t;
  const auto W1 = t.param(th.W1);
  const auto W2 = t.param(th.W2);
  const auto loss = cross_entropy(matching_logits(t.constant(P.norm_adjacency), t.constant(P.features), W1, W2), P.cls);
  return ad::grad_values(loss, std::array{W1, W2});
}

inline ad::Var condensed_loss(const MatchProblem& P, const ad::Var& Xp, const PhiVars& phi, const ad::Var& W1,
                              const ad::Var& W2) {
  const auto Ahat = normalize_adjacency(synth_adjacency(Xp, phi));
  return cross_entropy(matching_logits(Ahat, Xp, W1, W2), P.cls_p);
}

/// Distance at theta with X' and phi on the tape.
inline ad::Var match_distance(const MatchProblem& P, const ad::Var& Xp, const PhiVars& phi, const MatchingParams& th,
                              const std::vector<Matrix>& gG) {
  ad::Tape& t = *Xp.tape;
  const auto W1 = t.param(th.W1);
  const auto W2 = t.param(th.W2);
  const auto gK = ad::grad(condensed_loss(P, Xp, phi, W1, W2), std::array{W1, W2}, true);
  return gradient_match_distance(gK, gG);
}

/// One inner step of the matching network on the condensed graph.
inline void advance_theta(const MatchProblem& P, const Matrix& Xp, const AdjacencyMlp& phi, MatchingParams& th, double eta) {
  ad::Tape t;
  const auto W1 = t.param(th.W1);
  const auto W2 = t.param(th.W2);
  const auto g = ad::grad_values(condensed_loss(P, t.constant(Xp), phi_on_tape(phi, t, false), W1, W2), std::array{W1, W2});
  th.W1 -= eta * g[0];
  th.W2 -= eta * g[1];
}

/// Matching objective averaged over fixed theta0 draws: sum over T steps of
/// the distance along the condensed-graph trajectory.
inline double objective(const MatchProblem& P, const Matrix& Xp, const AdjacencyMlp& phi,
                        const std::vector<MatchingParams>& draws, int T, double eta) {
  double total = 0.0;
  for (auto th : draws) {
    for (int s = 0; s < T; ++s) {
      const auto gG = original_gradients(P, th);
      ad::Tape t;
      total += match_distance(P, t.constant(Xp), phi_on_tape(phi, t, false), th, gG).scalar();
      advance_theta(P, Xp, phi, th, eta);
    }
  }
  return total / static_cast<double>(draws.size());
}

}  // namespace detail

/// Condenses one graph. `classes` describes how node labels map to class
/// indices; by default it is derived from the graph itself.
inline CondensedGraph condense(const Graph& g, const CondenseConfig& cfg, LabelClasses classes = {}) {
  cfg.validate();
  if (!g.has_node_labels())
    throw ContractError("condense: graph " + std::to_string(g.id) +
                        " has no node labels; derive them first (for example with assign_degree_labels)");
  const std::size_t n = g.num_nodes();
  if (n < 4) throw ContractError("condense: graph " + std::to_string(g.id) + " has fewer than 4 nodes");
  if (classes.count == 0) classes = LabelClasses::of({&g});

  Rng rng(cfg.seed);
  detail::MatchProblem P;
  P.norm_adjacency = normalize_adjacency(g.adjacency);
  P.features = g.features;
  P.cls = classes.indices(g.node_labels);
  P.classes = classes.count;

  // class-stratified initialization of X'
  const std::size_t np = condensed_size(n, cfg.r);
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(classes.count));
  for (std::size_t i = 0; i < n; ++i) members[static_cast<std::size_t>(P.cls[i])].push_back(i);
  std::vector<double> fractions;
  for (const auto& m : members) fractions.push_back(double(m.size()) / double(n));
  const auto alloc = apportion(np, fractions);
  CondensedGraph out;
  out.source_id = g.id;
  out.sigma_sparse = cfg.sigma_sparse;
  for (std::size_t c = 0; c < members.size(); ++c) {
    auto m = members[c];
    rng.shuffle(m);
    out.source_nodes.insert(out.source_nodes.end(), m.begin(), m.begin() + static_cast<long>(alloc[c]));
  }
  std::sort(out.source_nodes.begin(), out.source_nodes.end());
  const auto npi = static_cast<Eigen::Index>(np);
  out.Xp.resize(npi, g.feature_dim());
  for (std::size_t k = 0; k < np; ++k) {
    out.Xp.row(static_cast<Eigen::Index>(k)) = g.features.row(static_cast<Eigen::Index>(out.source_nodes[k]));
    out.Yp.push_back(g.node_labels[out.source_nodes[k]]);
    P.cls_p.push_back(P.cls[out.source_nodes[k]]);
  }
  out.phi = init_adjacency_mlp(g.feature_dim(), cfg.phi_hidden, rng);

  const Eigen::Index d = g.feature_dim();
  auto draw_theta = [&](Rng& r) { return init_matching_params(d, cfg.hidden, classes.count, r); };
  Rng eval_rng(Rng::mix(cfg.seed) ^ 0x5eed5eed5eedULL);
  std::vector<MatchingParams> eval_draws;
  for (int s = 0; s < cfg.n_theta_samples; ++s) eval_draws.push_back(draw_theta(eval_rng));

  out.initial_distance = detail::objective(P, out.Xp, out.phi, eval_draws, cfg.T, cfg.eta);
  double best = out.initial_distance;
  Matrix best_x = out.Xp;
  AdjacencyMlp best_phi = out.phi;

  Adam opt_phi(cfg.lr_phi);
  Adam opt_x(cfg.lr_features);
  double prev = best;
  for (int round = 0; round < cfg.n_theta_samples; ++round) {
    MatchingParams th = draw_theta(rng);
    for (int s = 0; s < cfg.T; ++s) {
      const auto gG = detail::original_gradients(P, th);
      for (int k = 0; k < cfg.tau1; ++k) {
        ad::Tape t;
        const auto phi = phi_on_tape(out.phi, t, true);
        const auto D = detail::match_distance(P, t.constant(out.Xp), phi, th, gG);
        const auto grads = ad::grad_values(D, std::span<const ad::Var>(phi));
        auto slots = out.phi.slots();
        opt_phi.step({slots.begin(), slots.end()}, grads);
      }
      for (int k = 0; k < cfg.tau2; ++k) {
        ad::Tape t;
        const auto X = t.param(out.Xp);
        const auto D = detail::match_distance(P, X, phi_on_tape(out.phi, t, false), th, gG);
        opt_x.step({&out.Xp}, ad::grad_values(D, std::array{X}));
      }
      detail::advance_theta(P, out.Xp, out.phi, th, cfg.eta);
    }
    if (!out.Xp.allFinite() || !out.phi.W1.allFinite()) throw DivergenceError("condense", round);
    ++out.rounds;
    const double cur = detail::objective(P, out.Xp, out.phi, eval_draws, cfg.T, cfg.eta);
    if (cur < best) {
      best = cur;
      best_x = out.Xp;
      best_phi = out.phi;
    }
    const bool converged = prev > 0.0 ? (prev - cur) / prev < cfg.tol : true;
    prev = cur;
    if (converged) break;
  }
  // keep the best state seen on the evaluation draws
  out.Xp = best_x;
  out.phi = best_phi;
  out.final_distance = best;
  out.rebuild_adjacency();
  return out;
}

// ---------------------------------------------------------------------------
// Whole datasets.

struct CondensedDataset {
  GraphDataset dataset;                 // condensed graphs, small graphs copied unchanged
  std::vector<CondensedGraph> records;  // one per condensed graph
  std::size_t bypassed = 0;
  double initial_distance = 0.0;        // summed over condensed graphs
  double final_distance = 0.0;
};

inline std::uint64_t graph_seed(std::uint64_t seed, std::size_t graph_id) {
  return Rng::mix(seed ^ Rng::mix(static_cast<std::uint64_t>(graph_id) + 1));
}

/// Replaces every graph with a record by its condensed version; others are copied.
inline GraphDataset apply_condensed(const GraphDataset& source, const std::vector<CondensedGraph>& records) {
  GraphDataset out;
  out.name = source.name;
  out.feature_dim = source.feature_dim;
  std::vector<const CondensedGraph*> by_id(source.size(), nullptr);
  for (const auto& r : records) {
    if (r.source_id >= source.size()) throw ContractError("apply_condensed: record for unknown graph " + std::to_string(r.source_id));
    by_id[r.source_id] = &r;
  }
  for (std::size_t i = 0; i < source.size(); ++i) {
    const auto& g = source.graphs[i];
    if (by_id[i]) {
      if (by_id[i]->Xp.cols() != source.feature_dim)
        throw DimensionError("apply_condensed: record " + std::to_string(i) + " has feature dim " +
                             std::to_string(by_id[i]->Xp.cols()));
      out.graphs.push_back(by_id[i]->to_graph(g));
    } else {
      out.graphs.push_back(g);
    }
  }
  return out;
}

inline CondensedDataset condense_dataset(const GraphDataset& ds, const CondenseConfig& cfg) {
  cfg.validate();
  const auto classes = LabelClasses::of(ds.view());
  CondensedDataset out;
  for (const auto& g : ds.graphs) {
    if (g.num_nodes() < 4) {
      ++out.bypassed;
      continue;
    }
    CondenseConfig c = cfg;
    c.seed = graph_seed(cfg.seed, g.id);
    out.records.push_back(condense(g, c, classes));
    out.initial_distance += out.records.back().initial_distance;
    out.final_distance += out.records.back().final_distance;
  }
  out.dataset = apply_condensed(ds, out.records);
  return out;
}

// ---------------------------------------------------------------------------
// Text serialization; the format is described in docs/condensed-format.md.

inline constexpr const char* kCondensedMagic = "magad-condensed";
inline constexpr int kCondensedVersion = 1;

namespace detail {

inline void write_rows(std::ostream& os, const std::string& tag, const Matrix& m) {
  os << tag << ' ' << m.rows() << ' ' << m.cols() << '\n';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? " " : "") << m(i, j);
    os << '\n';
  }
}

class Reader {
 public:
  Reader(std::istream& is, std::string origin) : is_(is), origin_(std::move(origin)) {}

  std::istringstream line(const std::string& expect_tag) {
    std::string text;
    do {
      if (!std::getline(is_, text)) fail("unexpected end of input, expected '" + expect_tag + "'");
      ++line_;
    } while (text.empty());
    std::istringstream ss(text);
    std::string tag;
    ss >> tag;
    if (tag != expect_tag) fail("expected '" + expect_tag + "', found '" + tag + "'");
    return ss;
  }

  template <class T>
  T read(std::istringstream& ss, const char* what) {
    T v{};
    if (!(ss >> v)) fail(std::string("bad or missing ") + what);
    return v;
  }

  Matrix matrix(const std::string& tag) {
    auto head = line(tag);
    const auto r = read<Eigen::Index>(head, "row count");
    const auto c = read<Eigen::Index>(head, "column count");
    if (r < 0 || c < 0) fail("negative matrix shape");
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
      std::string text;
      if (!std::getline(is_, text)) fail("matrix '" + tag + "' ends early");
      ++line_;
      std::istringstream ss(text);
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = read<double>(ss, "matrix entry");
    }
    return m;
  }

  [[noreturn]] void fail(const std::string& what) const { throw IntegrityError(origin_, line_, what); }

 private:
  std::istream& is_;
  std::string origin_;
  std::size_t line_ = 0;
};

}  // namespace detail

inline void write_condensed(std::ostream& os, const std::vector<CondensedGraph>& records) {
  os << kCondensedMagic << ' ' << kCondensedVersion << '\n' << "graphs " << records.size() << '\n';
  os << std::setprecision(17);
  for (const auto& r : records) {
    os << "graph " << r.source_id << '\n';
    os << "sigma " << r.sigma_sparse << '\n';
    os << "distance " << r.initial_distance << ' ' << r.final_distance << ' ' << r.rounds << '\n';
    os << "labels";
    for (int y : r.Yp) os << ' ' << y;
    os << "\nsources";
    for (auto s : r.source_nodes) os << ' ' << s;
    os << '\n';
    detail::write_rows(os, "features", r.Xp);
    detail::write_rows(os, "phi.W1", r.phi.W1);
    detail::write_rows(os, "phi.b1", r.phi.b1);
    detail::write_rows(os, "phi.W2", r.phi.W2);
    detail::write_rows(os, "phi.b2", r.phi.b2);
  }
  os << "end\n";
}

inline std::vector<CondensedGraph> read_condensed(std::istream& is, const std::string& origin = "<stream>") {
  detail::Reader rd(is, origin);
  auto head = rd.line(kCondensedMagic);
  const int version = rd.read<int>(head, "version");
  if (version != kCondensedVersion) rd.fail("unsupported version " + std::to_string(version));
  auto count_line = rd.line("graphs");
  const auto count = rd.read<std::size_t>(count_line, "graph count");
  std::vector<CondensedGraph> out;
  for (std::size_t k = 0; k < count; ++k) {
    CondensedGraph r;
    auto gl = rd.line("graph");
    r.source_id = rd.read<std::size_t>(gl, "graph id");
    auto sl = rd.line("sigma");
    r.sigma_sparse = rd.read<double>(sl, "sigma");
    auto dl = rd.line("distance");
    r.initial_distance = rd.read<double>(dl, "initial distance");
    r.final_distance = rd.read<double>(dl, "final distance");
    r.rounds = rd.read<int>(dl, "rounds");
    auto ll = rd.line("labels");
    for (int y; ll >> y;) r.Yp.push_back(y);
    auto srcl = rd.line("sources");
    for (std::size_t s; srcl >> s;) r.source_nodes.push_back(s);
    r.Xp = rd.matrix("features");
    r.phi.W1 = rd.matrix("phi.W1");
    r.phi.b1 = rd.matrix("phi.b1");
    r.phi.W2 = rd.matrix("phi.W2");
    r.phi.b2 = rd.matrix("phi.b2");
    const auto n = static_cast<std::size_t>(r.Xp.rows());
    if (r.Yp.size() != n || r.source_nodes.size() != n) rd.fail("graph " + std::to_string(r.source_id) + ": label or source count differs from feature rows");
    if (n < 2) rd.fail("graph " + std::to_string(r.source_id) + ": fewer than 2 nodes");
    if (r.phi.W1.rows() != 2 * r.Xp.cols() || r.phi.b1.rows() != 1 || r.phi.b1.cols() != r.phi.W1.cols() ||
        r.phi.W2.rows() != r.phi.W1.cols() || r.phi.W2.cols() != 1 || r.phi.b2.size() != 1)
      rd.fail("graph " + std::to_string(r.source_id) + ": adjacency MLP shapes do not fit the features");
    r.rebuild_adjacency();
    out.push_back(std::move(r));
  }
  rd.line("end");
  return out;
}

inline void save_condensed(const std::string& path, const std::vector<CondensedGraph>& records) {
  std::ofstream os(path);
  if (!os) throw IngestionError("cannot write " + path);
  write_condensed(os, records);
  if (!os) throw IngestionError("write failed: " + path);
}

inline std::vector<CondensedGraph> load_condensed(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IngestionError("cannot read " + path);
  return read_condensed(is, path);
}

// ---------------------------------------------------------------------------
// Node classifier trained on graphs, used to compare condensed and original data.

struct NodeClassifierConfig {
  Eigen::Index hidden = 64;
  int steps = 200;
  double lr = 0.01;
  std::uint64_t seed = 0;
};

inline std::vector<int> class_indices(const GraphList& graphs, const LabelClasses& classes) {
  std::vector<int> y;
  for (const auto* g : graphs) {
    auto c = classes.indices(g->node_labels);
    y.insert(y.end(), c.begin(), c.end());
  }
  return y;
}

/// Full-batch Adam on the mean node cross-entropy over all graphs.
inline MatchingParams train_node_classifier(const GraphList& graphs, const LabelClasses& classes,
                                            const NodeClassifierConfig& cfg) {
  const auto batch = make_batch(graphs);
  const auto y = class_indices(graphs, classes);
  Rng rng(cfg.seed);
  MatchingParams th = init_matching_params(batch.features.cols(), cfg.hidden, classes.count, rng);
  Adam opt(cfg.lr);
  for (int s = 0; s < cfg.steps; ++s) {
    ad::Tape t;
    const auto W1 = t.param(th.W1);
    const auto W2 = t.param(th.W2);
    const auto loss = cross_entropy(matching_logits(t.constant(batch.norm_adjacency), t.constant(batch.features), W1, W2), y);
    opt.step({&th.W1, &th.W2}, ad::grad_values(loss, std::array{W1, W2}));
  }
  return th;
}

struct NodeClassifierEval {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline NodeClassifierEval evaluate_node_classifier(const MatchingParams& th, const GraphList& graphs,
                                                   const LabelClasses& classes) {
  const auto batch = make_batch(graphs);
  const auto y = class_indices(graphs, classes);
  ad::Tape t;
  const auto logits =
      matching_logits(t.constant(batch.norm_adjacency), t.constant(batch.features), t.constant(th.W1), t.constant(th.W2));
  NodeClassifierEval e;
  e.loss = cross_entropy(logits, y).scalar();
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index k = 0;
    logits.value().row(i).maxCoeff(&k);
    hits += (k == y[static_cast<std::size_t>(i)]);
  }
  e.accuracy = double(hits) / double(y.size());
  return e;
}

}  // namespace magad
