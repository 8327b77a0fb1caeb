#include <gtest/gtest.h>

#include <sstream>

#include "magad/condensation.hpp"
#include "magad/synthetic.hpp"
#include "support/gradcheck_cases.hpp"

namespace magad {
namespace {

using testing::random_matrix;

AdjacencyMlp random_phi(Rng& rng, Eigen::Index d, Eigen::Index h) {
  AdjacencyMlp phi = init_adjacency_mlp(d, h, rng);
  phi.b1 = random_matrix(rng, 1, h, -0.5, 0.5);
  phi.b2 = random_matrix(rng, 1, 1, -0.5, 0.5);
  return phi;
}

/// Small labelled graph: a path with a few chords, one-hot labels.
Graph labelled_graph(Rng& rng, Eigen::Index n, int classes) {
  Graph g;
  g.adjacency = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i + 1 < n; ++i) g.adjacency(i, i + 1) = g.adjacency(i + 1, i) = 1.0;
  for (int k = 0; k < 3; ++k) {
    const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(n)));
    const auto j = static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(n)));
    if (i != j) g.adjacency(i, j) = g.adjacency(j, i) = 1.0;
  }
  for (Eigen::Index i = 0; i < n; ++i) g.node_labels.push_back(static_cast<int>(i % classes));
  g.features = one_hot_features(g.node_labels, 0, classes);
  return g;
}

CondenseConfig small_config(std::uint64_t seed) {
  CondenseConfig c;
  c.seed = seed;
  c.hidden = 8;
  c.phi_hidden = 8;
  c.T = 3;
  c.tau1 = 3;
  c.tau2 = 3;
  c.n_theta_samples = 2;
  return c;
}

TEST(SynthAdjacency, SymmetricZeroDiagonalUnitRange) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto n = 2 + static_cast<Eigen::Index>(rng.below(12));
    const auto d = 1 + static_cast<Eigen::Index>(rng.below(6));
    const Matrix X = random_matrix(rng, n, d, -2.0, 2.0);
    const Matrix A = synth_adjacency(X, random_phi(rng, d, 5));
    EXPECT_EQ(A, A.transpose());
    EXPECT_EQ(A.diagonal(), Eigen::VectorXd::Zero(n));
    EXPECT_GE(A.minCoeff(), 0.0);
    EXPECT_LE(A.maxCoeff(), 1.0);
  }
}

TEST(SynthAdjacency, SaturatedBiasGivesDenseGraph) {
  Rng rng(2);
  const Matrix X = random_matrix(rng, 6, 3);
  AdjacencyMlp phi = init_adjacency_mlp(3, 4, rng);
  phi.b2(0, 0) = 20.0;
  const Matrix A = synth_adjacency(X, phi);
  for (Eigen::Index i = 0; i < 6; ++i)
    for (Eigen::Index j = 0; j < 6; ++j) {
      if (i == j) continue;
      EXPECT_GT(A(i, j), 0.999);
    }
}

TEST(SynthAdjacency, IdenticalRowsGiveConstantOffDiagonal) {
  Rng rng(3);
  const Matrix row = random_matrix(rng, 1, 4);
  const Matrix X = row.replicate(5, 1);
  const Matrix A = synth_adjacency(X, random_phi(rng, 4, 6));
  for (Eigen::Index i = 0; i < 5; ++i)
    for (Eigen::Index j = 0; j < 5; ++j) {
      if (i == j) continue;
      EXPECT_EQ(A(i, j), A(0, 1));
    }
}

TEST(SynthAdjacency, MatchesPairwiseOracle) {
  Rng rng(4);
  const Matrix X = random_matrix(rng, 5, 3);
  const AdjacencyMlp phi = random_phi(rng, 3, 7);
  auto mlp = [&](Eigen::Index i, Eigen::Index j) {
    Matrix in(1, 6);
    in << X.row(i), X.row(j);
    return (((in * phi.W1 + phi.b1).cwiseMax(0.0)) * phi.W2 + phi.b2)(0, 0);
  };
  const Matrix A = synth_adjacency(X, phi);
  for (Eigen::Index i = 0; i < 5; ++i)
    for (Eigen::Index j = 0; j < 5; ++j) {
      if (i == j) continue;
      const double expect = 1.0 / (1.0 + std::exp(-(mlp(i, j) + mlp(j, i)) / 2.0));
      EXPECT_NEAR(A(i, j), expect, 1e-14);
    }
}

TEST(SynthAdjacency, Errors) {
  Rng rng(5);
  EXPECT_THROW(synth_adjacency(random_matrix(rng, 1, 3), init_adjacency_mlp(3, 4, rng)), ContractError);
  EXPECT_THROW(synth_adjacency(random_matrix(rng, 4, 3), init_adjacency_mlp(2, 4, rng)), DimensionError);
}

TEST(Sparsify, Examples) {
  Rng rng(6);
  const Matrix A = synth_adjacency(random_matrix(rng, 6, 2), random_phi(rng, 2, 4));
  EXPECT_EQ(sparsify(A, 0.0), A);
  EXPECT_EQ(sparsify(A, 1.0), Matrix::Zero(6, 6));
  Matrix small(2, 2);
  small << 0.0, 0.4, 0.4, 0.0;
  EXPECT_EQ(sparsify(small, 0.5), Matrix::Zero(2, 2));
  const Matrix s = sparsify(A, 0.5);
  for (Eigen::Index i = 0; i < A.size(); ++i)
    EXPECT_EQ(s.data()[i], A.data()[i] < 0.5 ? 0.0 : A.data()[i]);
}

TEST(NormalizeAdjacencyVar, MatchesMatrixVersionAndGradients) {
  Rng rng(7);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Matrix a = random_matrix(rng, 5, 5, 0.1, 1.0);
    a = ((a + a.transpose()) / 2.0).eval();
    a.diagonal().setZero();
    ad::Tape t;
    const auto A = t.param(a);
    const auto n = normalize_adjacency(A);
    EXPECT_LT((n.value() - normalize_adjacency(a)).cwiseAbs().maxCoeff(), 1e-14);
    const auto y = ad::sum(ad::mul(n, t.constant(testing::readout_weights(rng, 5, 5))));
    EXPECT_LT(testing::max_relative_error(ad::backward(y), ad::finite_difference(y, 1e-6)), 1e-4);
  }
}

TEST(CrossEntropy, MatchesDirectFormula) {
  Rng rng(8);
  const Matrix L = random_matrix(rng, 6, 4, -3.0, 3.0);
  const std::vector<int> y{0, 3, 2, 1, 1, 0};
  double expect = 0.0;
  for (Eigen::Index i = 0; i < 6; ++i) {
    double z = 0.0;
    for (Eigen::Index c = 0; c < 4; ++c) z += std::exp(L(i, c));
    expect += std::log(z) - L(i, y[static_cast<std::size_t>(i)]);
  }
  ad::Tape t;
  EXPECT_NEAR(cross_entropy(t.constant(L), y).scalar(), expect / 6.0, 1e-12);
  EXPECT_THROW(cross_entropy(t.constant(L), {0, 1}), ContractError);
  EXPECT_THROW(cross_entropy(t.constant(L), {0, 4, 0, 0, 0, 0}), ContractError);
}

TEST(CrossEntropy, LargeLogitsStayFinite) {
  Matrix L(2, 3);
  L << 1000.0, 0.0, -1000.0, -800.0, 800.0, 0.0;
  ad::Tape t;
  const auto x = t.param(L);
  const auto loss = cross_entropy(x, {0, 1});
  EXPECT_NEAR(loss.scalar(), 0.0, 1e-12);
  EXPECT_TRUE(ad::grad_values(loss, std::array{x})[0].allFinite());
}

TEST(GradientMatchDistance, ClosedFormCases) {
  Rng rng(9);
  const std::vector<Matrix> g{random_matrix(rng, 5, 3), random_matrix(rng, 3, 4)};
  EXPECT_EQ(gradient_match_distance(g, g), 0.0);
  EXPECT_EQ(gradient_match_distance({2.0 * g[0], 2.0 * g[1]}, g), 0.0);
  EXPECT_EQ(gradient_match_distance(g, {2.0 * g[0], 2.0 * g[1]}), 0.0);

  // columns pairwise orthogonal: distance d2 per layer
  const Matrix e = Matrix::Identity(4, 4);
  Matrix a = e.leftCols(2);
  Matrix b = e.rightCols(2);
  EXPECT_EQ(gradient_match_distance({a}, {b}), 2.0);
  EXPECT_EQ(gradient_match_distance({a, e.leftCols(3)}, {b, e.rightCols(3)}), 5.0);

  // opposite columns count 2 each
  EXPECT_EQ(gradient_match_distance({a}, {-a}), 4.0);
}

TEST(GradientMatchDistance, ZeroColumns) {
  Matrix k = Matrix::Zero(3, 2);
  Matrix g = Matrix::Zero(3, 2);
  EXPECT_EQ(gradient_match_distance({k}, {g}), 0.0);
  k(0, 0) = 1.0;
  EXPECT_EQ(gradient_match_distance({k}, {g}), 1.0);
  EXPECT_EQ(gradient_match_distance({g}, {k}), 1.0);
}

TEST(GradientMatchDistance, ColumnScaleInvarianceAndBounds) {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const auto r = 1 + static_cast<Eigen::Index>(rng.below(6));
    const auto c = 1 + static_cast<Eigen::Index>(rng.below(6));
    const Matrix a = random_matrix(rng, r, c);
    const Matrix b = random_matrix(rng, r, c);
    Matrix scales = random_matrix(rng, 1, c, 0.01, 100.0);
    const Matrix as = (a.array().rowwise() * scales.row(0).array()).matrix();
    const double d = gradient_match_distance({a}, {b});
    EXPECT_NEAR(gradient_match_distance({as}, {b}), d, 1e-12);
    EXPECT_NEAR(gradient_match_distance({a}, {as}), gradient_match_distance({a}, {a}), 1e-12);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 2.0 * static_cast<double>(c));
  }
}

TEST(GradientMatchDistance, ShapeMismatch) {
  EXPECT_THROW(gradient_match_distance({Matrix::Ones(2, 2)}, {Matrix::Ones(2, 3)}), ContractError);
  EXPECT_THROW(gradient_match_distance({Matrix::Ones(2, 2)}, {}), ContractError);
}

TEST(GradientMatchDistance, TapeVersionMatchesAndDifferentiates) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const std::vector<Matrix> gg{random_matrix(rng, 4, 3), random_matrix(rng, 3, 2)};
    ad::Tape t;
    std::vector<ad::Var> gk{t.param(random_matrix(rng, 4, 3)), t.param(random_matrix(rng, 3, 2))};
    const auto d = gradient_match_distance(gk, gg);
    EXPECT_NEAR(d.scalar(), gradient_match_distance({gk[0].value(), gk[1].value()}, gg), 1e-12);
    EXPECT_LT(testing::max_relative_error(ad::backward(d), ad::finite_difference(d, 1e-6)), 1e-4);
  }
  // zero columns on either side
  ad::Tape t;
  Matrix g = Matrix::Ones(3, 3);
  g.col(1).setZero();
  Matrix k = Matrix::Ones(3, 3);
  k.col(2).setZero();
  const auto d = gradient_match_distance(std::vector<ad::Var>{t.param(k)}, {g});
  EXPECT_NEAR(d.scalar(), gradient_match_distance({k}, {g}), 1e-15);
  EXPECT_TRUE(ad::backward(d).flat.size() == 9);
}

TEST(MatchDistance, SecondOrderGradientsMatchFiniteDifferences) {
  // derivative of the matching distance through the gradient of the condensed loss
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    const Graph g = labelled_graph(rng, 7, 3);
    detail::MatchProblem P;
    P.norm_adjacency = normalize_adjacency(g.adjacency);
    P.features = g.features;
    P.cls = g.node_labels;
    P.cls_p = {0, 1, 2, 0};
    P.classes = 3;
    const MatchingParams th = init_matching_params(3, 5, 3, rng);
    const auto gG = detail::original_gradients(P, th);
    const Matrix xp = random_matrix(rng, 4, 3, 0.1, 1.0);
    const AdjacencyMlp phi = random_phi(rng, 3, 4);
    {
      ad::Tape t;
      const auto D = detail::match_distance(P, t.param(xp), phi_on_tape(phi, t, false), th, gG);
      EXPECT_LT(testing::max_relative_error(ad::backward(D), ad::finite_difference(D, 1e-6)), 1e-4) << "X' seed " << seed;
    }
    {
      ad::Tape t;
      const auto D = detail::match_distance(P, t.constant(xp), phi_on_tape(phi, t, true), th, gG);
      EXPECT_LT(testing::max_relative_error(ad::backward(D), ad::finite_difference(D, 1e-6)), 1e-4) << "phi seed " << seed;
    }
  }
}

TEST(Condense, SizeRule) {
  EXPECT_EQ(condensed_size(10, 0.6), 6u);
  EXPECT_EQ(condensed_size(4, 0.1), 2u);
  EXPECT_EQ(condensed_size(12, 0.6), 7u);
  EXPECT_EQ(condensed_size(7, 1.0), 7u);
  Rng rng(12);
  const auto c = condense(labelled_graph(rng, 10, 3), small_config(1));
  EXPECT_EQ(c.num_nodes(), 6u);
}

TEST(Condense, PreconditionsAndConfig) {
  Rng rng(13);
  Graph g = labelled_graph(rng, 8, 2);
  Graph unlabeled = g;
  unlabeled.node_labels.clear();
  EXPECT_THROW(condense(unlabeled, small_config(0)), ContractError);
  EXPECT_THROW(condense(labelled_graph(rng, 3, 2), small_config(0)), ContractError);
  auto bad = small_config(0);
  bad.r = 0.0;
  EXPECT_THROW(condense(g, bad), ConfigError);
  bad = small_config(0);
  bad.tau1 = 0;
  EXPECT_THROW(condense(g, bad), ConfigError);
}

TEST(Condense, InvariantsAndProvenance) {
  Rng rng(14);
  Graph g = labelled_graph(rng, 11, 3);
  g.node_anomaly_mask = std::vector<int>(11, 0);
  g.node_anomaly_mask[2] = g.node_anomaly_mask[5] = 1;
  g.graph_label = g.true_label = 1;
  const auto cfg = small_config(3);
  const auto c = condense(g, cfg);
  EXPECT_EQ(c.Ap, c.Ap.transpose());
  EXPECT_EQ(c.Ap.diagonal(), Eigen::VectorXd::Zero(c.Ap.rows()));
  for (Eigen::Index i = 0; i < c.Ap.size(); ++i) {
    const double v = c.Ap.data()[i];
    EXPECT_TRUE(v == 0.0 || (v >= cfg.sigma_sparse && v <= 1.0)) << v;
  }
  // class proportions within one node of the original
  for (int cls = 0; cls < 3; ++cls) {
    const double orig = std::count(g.node_labels.begin(), g.node_labels.end(), cls) / 11.0;
    const double kept = static_cast<double>(std::count(c.Yp.begin(), c.Yp.end(), cls));
    EXPECT_LE(std::abs(kept - orig * static_cast<double>(c.num_nodes())), 1.0);
  }
  const Graph cg = c.to_graph(g);
  cg.validate();
  ASSERT_EQ(cg.node_anomaly_mask.size(), c.num_nodes());
  for (std::size_t k = 0; k < c.num_nodes(); ++k) {
    EXPECT_EQ(cg.node_anomaly_mask[k], g.node_anomaly_mask[c.source_nodes[k]]);
    EXPECT_EQ(c.Yp[k], g.node_labels[c.source_nodes[k]]);
  }
  EXPECT_EQ(cg.graph_label, 1);
  EXPECT_LE(c.final_distance, c.initial_distance);
}

TEST(Condense, DeterministicUnderSeed) {
  Rng rng(15);
  const Graph g = labelled_graph(rng, 9, 3);
  const auto a = condense(g, small_config(7));
  const auto b = condense(g, small_config(7));
  EXPECT_EQ(a.Xp, b.Xp);
  EXPECT_EQ(a.Ap, b.Ap);
  EXPECT_EQ(a.phi.W1, b.phi.W1);
  EXPECT_EQ(a.final_distance, b.final_distance);
  const auto c = condense(g, small_config(8));
  EXPECT_NE(a.Xp, c.Xp);
}

TEST(Condense, FullRatioStartsFromOriginalFeatures) {
  Rng rng(16);
  const Graph g = labelled_graph(rng, 6, 2);
  auto cfg = small_config(1);
  cfg.r = 1.0;
  cfg.lr_features = cfg.lr_phi = 1e-12;  // effectively no optimization
  const auto c = condense(g, cfg);
  EXPECT_LT((c.Xp - g.features).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_EQ(c.Yp, g.node_labels);
}

TEST(Condense, MatchingDistanceDecreases) {
  auto ds = generate_synthetic(12, 10, 0.3, 4);
  int decreased = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CondenseConfig cfg;
    cfg.seed = seed;
    cfg.hidden = 16;
    const auto c = condense(ds.graphs[seed], cfg);
    decreased += c.final_distance < c.initial_distance;
  }
  EXPECT_GE(decreased, 9);
}

TEST(CondenseDataset, BypassesSmallGraphsAndKeepsLabels) {
  auto ds = generate_synthetic(6, 8, 0.5, 2);
  Graph tiny;
  tiny.adjacency = Matrix::Zero(3, 3);
  tiny.adjacency(0, 1) = tiny.adjacency(1, 0) = 1.0;
  tiny.node_labels = {0, 0, 1};
  tiny.features = one_hot_features(tiny.node_labels, 0, ds.feature_dim);
  tiny.id = ds.size();
  tiny.graph_label = tiny.true_label = 1;
  ds.graphs.push_back(tiny);
  auto cfg = small_config(2);
  const auto cd = condense_dataset(ds, cfg);
  EXPECT_EQ(cd.bypassed, 1u);
  EXPECT_EQ(cd.records.size(), ds.size() - 1);
  ASSERT_EQ(cd.dataset.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(cd.dataset.graphs[i].graph_label, ds.graphs[i].graph_label);
    EXPECT_EQ(cd.dataset.graphs[i].id, ds.graphs[i].id);
  }
  EXPECT_EQ(cd.dataset.graphs.back().adjacency, tiny.adjacency);
  EXPECT_EQ(cd.dataset.graphs[0].num_nodes(), condensed_size(ds.graphs[0].num_nodes(), cfg.r));
  cd.dataset.validate();
}

TEST(CondensedFormat, RoundTripIsExact) {
  auto ds = generate_synthetic(3, 8, 0.4, 5);
  const auto cd = condense_dataset(ds, small_config(4));
  std::stringstream ss;
  write_condensed(ss, cd.records);
  const auto back = read_condensed(ss);
  ASSERT_EQ(back.size(), cd.records.size());
  for (std::size_t k = 0; k < back.size(); ++k) {
    EXPECT_EQ(back[k].Xp, cd.records[k].Xp);
    EXPECT_EQ(back[k].phi.W1, cd.records[k].phi.W1);
    EXPECT_EQ(back[k].phi.b2, cd.records[k].phi.b2);
    EXPECT_EQ(back[k].Ap, cd.records[k].Ap);
    EXPECT_EQ(back[k].Yp, cd.records[k].Yp);
    EXPECT_EQ(back[k].source_nodes, cd.records[k].source_nodes);
    EXPECT_EQ(back[k].final_distance, cd.records[k].final_distance);
  }
}

TEST(CondensedFormat, RejectsBadInput) {
  auto ds = generate_synthetic(2, 8, 0.5, 6);
  const auto cd = condense_dataset(ds, small_config(1));
  std::stringstream ss;
  write_condensed(ss, cd.records);
  const std::string text = ss.str();

  std::istringstream wrong_version("magad-condensed 99\ngraphs 0\nend\n");
  EXPECT_THROW(read_condensed(wrong_version), IntegrityError);
  std::istringstream truncated(text.substr(0, text.size() / 2));
  EXPECT_THROW(read_condensed(truncated), IntegrityError);
  std::istringstream empty("");
  EXPECT_THROW(read_condensed(empty), IntegrityError);
  try {
    std::istringstream bad("magad-condensed 1\ngraphs 1\ngraph x\n");
    read_condensed(bad, "cache.txt");
    FAIL();
  } catch (const IntegrityError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(NodeClassifier, LearnsAndEvaluates) {
  auto ds = generate_synthetic(20, 10, 0.3, 9);
  const auto classes = LabelClasses::of(ds.view());
  NodeClassifierConfig nc;
  nc.steps = 0;
  const auto before = evaluate_node_classifier(train_node_classifier(ds.view(), classes, nc), ds.view(), classes);
  nc.steps = 150;
  const auto after = evaluate_node_classifier(train_node_classifier(ds.view(), classes, nc), ds.view(), classes);
  EXPECT_LT(after.loss, before.loss);
  EXPECT_GT(after.accuracy, before.accuracy);
}

// Both classifiers are scored on the original graphs. Under r = 1 the
// adjacency is a function of one-hot degree features, so this measures how
// much structure the generator can carry.
TEST(NodeClassifier, FullRatioCondensationKeepsAccuracy) {
  auto ds = generate_synthetic(20, 10, 0.3, 9);
  const auto classes = LabelClasses::of(ds.view());
  CondenseConfig cfg;
  cfg.r = 1.0;
  const auto cd = condense_dataset(ds, cfg);
  NodeClassifierConfig nc;
  const auto on_originals = evaluate_node_classifier(train_node_classifier(ds.view(), classes, nc), ds.view(), classes);
  const auto on_condensed =
      evaluate_node_classifier(train_node_classifier(cd.dataset.view(), classes, nc), ds.view(), classes);
  EXPECT_GE(on_condensed.accuracy, on_originals.accuracy - 0.05)
      << "originals " << on_originals.accuracy << " condensed " << on_condensed.accuracy;
}

}  // namespace
}  // namespace magad
