#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "magad/sampling.hpp"
#include "magad/synthetic.hpp"
#include "magad/tudataset.hpp"

namespace magad {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("magad_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  void write(const std::string& file, const std::string& content) const { std::ofstream(path_ / file) << content; }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

// Graph 1: triangle on nodes 1..3. Graph 2: path 4-5-6-7.
void write_fixture(const TempDir& d, bool node_labels = true) {
  d.write("TOY_A.txt", "1, 2\n2, 1\n2, 3\n3, 2\n1,3\n3,1\n4, 5\n5, 4\n5, 6\n6, 5\n6, 7\n7, 6\n");
  d.write("TOY_graph_indicator.txt", "1\n1\n1\n2\n2\n2\n2\n");
  d.write("TOY_graph_labels.txt", "1\n-1\n");
  if (node_labels) d.write("TOY_node_labels.txt", "0\n1\n0\n2\n2\n1\n0\n");
}

std::string mutag_dir() {
  const char* root = std::getenv("MAGAD_DATA_DIR");
  if (root == nullptr || *root == '\0') return {};
  auto p = fs::path(root) / "MUTAG";
  return fs::exists(p / "MUTAG_A.txt") ? p.string() : std::string{};
}

TEST(ParseTudataset, HandcraftedFixture) {
  TempDir d;
  write_fixture(d);
  auto ds = parse_tudataset(d.path(), "TOY");
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.graphs[0].num_nodes(), 3u);
  EXPECT_EQ(ds.graphs[1].num_nodes(), 4u);
  EXPECT_NO_THROW(ds.validate());
  EXPECT_EQ(ds.graphs[0].adjacency.sum(), 6.0);
  EXPECT_EQ(ds.graphs[1].adjacency.sum(), 6.0);
  EXPECT_EQ(ds.graphs[1].adjacency(0, 1), 1.0);
  EXPECT_EQ(ds.graphs[1].adjacency(0, 3), 0.0);
  EXPECT_EQ(ds.feature_dim, 3);
  EXPECT_EQ(ds.graphs[1].features.row(0), (Matrix(1, 3) << 0, 0, 1).finished());
}

TEST(ParseTudataset, DuplicateDirectedPairsCollapse) {
  TempDir d;
  d.write("DUP_A.txt", "1, 2\n1, 2\n2, 1\n");
  d.write("DUP_graph_indicator.txt", "1\n1\n");
  d.write("DUP_graph_labels.txt", "0\n");
  auto ds = parse_tudataset(d.path(), "DUP");
  EXPECT_EQ(ds.graphs[0].adjacency.sum(), 2.0);
}

TEST(ParseTudataset, TieInGraphLabelsMakesLargerLabelAnomalous) {
  TempDir d;
  write_fixture(d);
  auto ds = parse_tudataset(d.path(), "TOY");
  EXPECT_EQ(ds.graphs[0].graph_label, 1);  // raw 1 > raw -1
  EXPECT_EQ(ds.graphs[1].graph_label, 0);
}

TEST(ParseTudataset, WithoutNodeLabelsUsesConstantAndDegree) {
  TempDir d;
  write_fixture(d, false);
  auto ds = parse_tudataset(d.path(), "TOY");
  EXPECT_EQ(ds.feature_dim, 2);
  EXPECT_EQ(ds.graphs[1].features(0, 0), 1.0);
  EXPECT_EQ(ds.graphs[1].features(0, 1), 1.0);
  EXPECT_EQ(ds.graphs[1].features(1, 1), 2.0);
  EXPECT_FALSE(ds.graphs[0].has_node_labels());
}

TEST(ParseTudataset, MissingFileIsNamed) {
  TempDir d;
  write_fixture(d);
  fs::remove(d.path() / "TOY_graph_labels.txt");
  try {
    parse_tudataset(d.path(), "TOY");
    FAIL();
  } catch (const IngestionError& e) {
    EXPECT_NE(std::string(e.what()).find("TOY_graph_labels.txt"), std::string::npos);
  }
}

TEST(ParseTudataset, DanglingNodeReportsLine) {
  TempDir d;
  write_fixture(d);
  d.write("TOY_A.txt", "1, 2\n2, 1\n2, 9\n");
  try {
    parse_tudataset(d.path(), "TOY");
    FAIL();
  } catch (const IntegrityError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(ParseTudataset, DanglingGraphIdReportsLine) {
  TempDir d;
  write_fixture(d);
  d.write("TOY_graph_indicator.txt", "1\n1\n1\n2\n2\n3\n2\n");
  try {
    parse_tudataset(d.path(), "TOY");
    FAIL();
  } catch (const IntegrityError& e) {
    EXPECT_EQ(e.line(), 6u);
  }
}

TEST(ParseTudataset, RoundTripPreservesEverything) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto ds = generate_synthetic(30, 8 + seed, 0.3, seed);
    TempDir d;
    write_tudataset(ds, d.path());
    auto back = parse_tudataset(d.path(), ds.name);
    ASSERT_EQ(back.size(), ds.size());
    EXPECT_EQ(back.feature_dim, ds.feature_dim);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      EXPECT_EQ(back.graphs[i].adjacency, ds.graphs[i].adjacency);
      EXPECT_EQ(back.graphs[i].features, ds.graphs[i].features);
      EXPECT_EQ(back.graphs[i].node_labels, ds.graphs[i].node_labels);
      EXPECT_EQ(back.graphs[i].node_anomaly_mask, ds.graphs[i].node_anomaly_mask);
      EXPECT_EQ(back.graphs[i].graph_label, ds.graphs[i].graph_label);
    }
  }
}

TEST(ParseTudataset, Mutag) {
  const auto dir = mutag_dir();
  if (dir.empty()) GTEST_SKIP() << "MAGAD_DATA_DIR/MUTAG not available";
  auto ds = parse_tudataset(dir, "MUTAG");
  EXPECT_EQ(ds.size(), 188u);
  std::size_t nodes = 0;
  double directed_edges = 0;
  for (const auto& g : ds.graphs) {
    nodes += g.num_nodes();
    directed_edges += g.adjacency.sum();
  }
  EXPECT_EQ(nodes, 3371u);
  EXPECT_EQ(directed_edges, 7442.0);
  EXPECT_NEAR(ds.anomaly_ratio(), 0.335, 0.001);
  EXPECT_EQ(ds.feature_dim, 7);
  EXPECT_NO_THROW(ds.validate());
}

TEST(ParseTudataset, Aids) {
  const char* root = std::getenv("MAGAD_DATA_DIR");
  if (root == nullptr || !fs::exists(fs::path(root) / "AIDS" / "AIDS_A.txt")) GTEST_SKIP() << "AIDS not available";
  auto ds = parse_tudataset(fs::path(root) / "AIDS", "AIDS");
  EXPECT_EQ(ds.size(), 2000u);
  EXPECT_NEAR(ds.anomaly_ratio(), 0.2, 1e-12);
}

TEST(Synthetic, CountsAndCliques) {
  auto ds = generate_synthetic(100, 12, 0.3, 42);
  EXPECT_EQ(ds.size(), 100u);
  EXPECT_EQ(ds.num_anomalous(), 30u);
  EXPECT_NO_THROW(ds.validate());
  for (const auto& g : ds.graphs) {
    const auto masked = std::count(g.node_anomaly_mask.begin(), g.node_anomaly_mask.end(), 1);
    if (g.graph_label == 0) {
      EXPECT_EQ(masked, 0);
      continue;
    }
    ASSERT_EQ(masked, 4);
    double inner = 0;
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t j = 0; j < 12; ++j)
        if (i != j && g.node_anomaly_mask[i] && g.node_anomaly_mask[j])
          inner += g.adjacency(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    EXPECT_EQ(inner / (4.0 * 3.0), 1.0);
  }
}

TEST(Synthetic, DeterministicUnderSeed) {
  auto a = generate_synthetic(20, 10, 0.25, 9);
  auto b = generate_synthetic(20, 10, 0.25, 9);
  auto c = generate_synthetic(20, 10, 0.25, 10);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.graphs[i].adjacency, b.graphs[i].adjacency);
    EXPECT_EQ(a.graphs[i].graph_label, b.graphs[i].graph_label);
    any_diff |= a.graphs[i].adjacency != c.graphs[i].adjacency;
  }
  EXPECT_TRUE(any_diff);
}

TEST(Synthetic, DegenerateArguments) {
  EXPECT_THROW(generate_synthetic(10, 12, 0.0, 1), ArgumentError);
  EXPECT_THROW(generate_synthetic(10, 12, 1.0, 1), ArgumentError);
  EXPECT_THROW(generate_synthetic(10, 5, 0.3, 1), ArgumentError);
  EXPECT_THROW(generate_synthetic(2, 12, 0.1, 1), ArgumentError);
}

TEST(Split, StratifiedCounts) {
  auto ds = generate_synthetic(100, 8, 0.2, 1);
  auto s = split_dataset(ds, {0.4, 0.2, 0.4}, 5);
  EXPECT_EQ(s.train.size(), 40u);
  EXPECT_EQ(s.validation.size(), 20u);
  EXPECT_EQ(s.test.size(), 40u);
  auto anomalies = [&](const std::vector<std::size_t>& idx) {
    return std::count_if(idx.begin(), idx.end(), [&](auto i) { return ds.graphs[i].graph_label == 1; });
  };
  EXPECT_EQ(anomalies(s.train), 8);
  EXPECT_EQ(anomalies(s.validation), 4);
  EXPECT_EQ(anomalies(s.test), 8);
}

TEST(Split, MutagSizes) {
  // 125 normal / 63 anomalous graphs; largest remainder per class gives 75/38/75.
  GraphDataset ds;
  for (std::size_t i = 0; i < 188; ++i) {
    Graph g;
    g.id = i;
    g.graph_label = i < 63 ? 1 : 0;
    ds.graphs.push_back(g);
  }
  auto s = split_dataset(ds, {0.4, 0.2, 0.4}, 0);
  EXPECT_EQ(s.train.size(), 75u);
  EXPECT_EQ(s.validation.size(), 38u);
  EXPECT_EQ(s.test.size(), 75u);
}

TEST(Split, Errors) {
  GraphDataset empty;
  EXPECT_THROW(split_dataset(empty, {0.4, 0.2, 0.4}, 0), ArgumentError);
  auto ds = generate_synthetic(10, 8, 0.2, 1);
  EXPECT_THROW(split_dataset(ds, {0.5, 0.2, 0.4}, 0), ArgumentError);
  auto s = split_dataset(ds, {0.4, 0.2, 0.4}, 0);
  EXPECT_FALSE(s.warnings.empty());  // 2 anomalies over 3 splits
}

TEST(Split, PropertyPartitionAndProportionality) {
  Rng meta(77);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 10 + meta.below(150);
    const double frac = 0.1 + 0.4 * meta.uniform();
    auto ds = generate_synthetic(n, 6, frac, meta.next());
    const std::array<double, 3> f{0.4, 0.2, 0.4};
    const auto seed = meta.next();
    auto s = split_dataset(ds, f, seed);
    std::vector<std::size_t> all;
    for (const auto* p : {&s.train, &s.validation, &s.test}) all.insert(all.end(), p->begin(), p->end());
    std::sort(all.begin(), all.end());
    ASSERT_EQ(all.size(), n);
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(all[i], i);
    const double total_anom = static_cast<double>(ds.num_anomalous());
    std::size_t k = 0;
    for (const auto* p : {&s.train, &s.validation, &s.test}) {
      const double a = static_cast<double>(
          std::count_if(p->begin(), p->end(), [&](auto i) { return ds.graphs[i].graph_label == 1; }));
      EXPECT_LE(std::abs(a - f[k] * total_anom), 1.0);
      ++k;
    }
    auto again = split_dataset(ds, f, seed);
    EXPECT_EQ(again.train, s.train);
    EXPECT_EQ(again.test, s.test);
  }
}

TEST(Episode, HalvesAndDisjointness) {
  auto ds = generate_synthetic(40, 8, 0.25, 3);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto ep = make_episode(ds, 0.5, seed);
    EXPECT_EQ(ep.support.size(), 20u);
    EXPECT_EQ(ep.query.size(), 20u);
    std::set<const Graph*> s(ep.support.begin(), ep.support.end());
    for (const auto* g : ep.query) EXPECT_EQ(s.count(g), 0u);
    auto has_anomaly = [](const GraphList& l) {
      return std::any_of(l.begin(), l.end(), [](const Graph* g) { return g->graph_label == 1; });
    };
    EXPECT_TRUE(has_anomaly(ep.support));
    EXPECT_TRUE(has_anomaly(ep.query));
  }
}

TEST(Episode, TwoAnomaliesLandInBothHalvesForAllSeeds) {
  auto ds = generate_synthetic(20, 8, 0.1, 4);
  ASSERT_EQ(ds.num_anomalous(), 2u);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto ep = make_episode(ds, 0.5, seed);
    const auto a = std::count_if(ep.query.begin(), ep.query.end(), [](const Graph* g) { return g->graph_label == 1; });
    EXPECT_EQ(a, 1);
  }
}

TEST(Episode, SingleClassIsAnError) {
  auto ds = generate_synthetic(10, 8, 0.2, 1);
  for (auto& g : ds.graphs) g.graph_label = 0;
  EXPECT_THROW(make_episode(ds, 0.5, 0), EpisodeError);
  GraphDataset tiny;
  tiny.graphs.resize(1);
  EXPECT_THROW(make_episode(tiny, 0.5, 0), EpisodeError);
}

TEST(Contaminate, RateZeroIsIdentity) {
  auto ds = generate_synthetic(50, 8, 0.3, 2);
  auto s = split_dataset(ds, {0.4, 0.2, 0.4}, 0);
  auto c = contaminate(ds, s.train, 0.0, 1);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(c.graphs[i].graph_label, ds.graphs[i].graph_label);
}

TEST(Contaminate, FlipsFloorRateTimesNormals) {
  GraphDataset ds;
  std::vector<std::size_t> train;
  for (std::size_t i = 0; i < 130; ++i) {
    Graph g;
    g.id = i;
    g.graph_label = g.true_label = i < 30 ? 1 : 0;
    ds.graphs.push_back(g);
    train.push_back(i);
  }
  auto c = contaminate(ds, train, 0.1, 7);
  std::size_t flipped = 0;
  for (const auto& g : c.graphs) {
    flipped += g.true_label == 1 && g.graph_label == 0;
    EXPECT_EQ(g.true_label, ds.graphs[g.id].true_label);
  }
  EXPECT_EQ(flipped, 10u);
  EXPECT_THROW(contaminate(ds, train, 0.3, 7), ArgumentError);
  EXPECT_THROW(contaminate(ds, train, -0.1, 7), ArgumentError);
}

TEST(Contaminate, OnlyTouchesTrainingPortion) {
  auto ds = generate_synthetic(100, 8, 0.3, 5);
  auto s = split_dataset(ds, {0.4, 0.2, 0.4}, 0);
  auto c = contaminate(ds, s.train, 0.2, 3);
  for (auto i : s.test) EXPECT_EQ(c.graphs[i].graph_label, ds.graphs[i].graph_label);
  for (auto i : s.validation) EXPECT_EQ(c.graphs[i].graph_label, ds.graphs[i].graph_label);
}

TEST(KShot, ExactlyKLabeledAnomalies) {
  auto ds = generate_synthetic(60, 8, 0.3, 8);
  auto pool = ds.view();
  for (std::size_t k : {1u, 2u, 4u, 8u}) {
    auto view = limit_labeled_anomalies(pool, k, 11);
    const auto a = std::count_if(view.begin(), view.end(), [](const Graph* g) { return g->graph_label == 1; });
    EXPECT_EQ(static_cast<std::size_t>(a), k);
    EXPECT_EQ(view.size(), 42u + k);
  }
  auto full = limit_labeled_anomalies(pool, ds.num_anomalous(), 11);
  EXPECT_EQ(full, pool);
  EXPECT_THROW(limit_labeled_anomalies(pool, 0, 1), ArgumentError);
  EXPECT_THROW(limit_labeled_anomalies(pool, 19, 1), ArgumentError);
}

TEST(KShot, BatchesNeverRepeatAGraph) {
  auto ds = generate_synthetic(60, 8, 0.3, 8);
  Rng rng(1);
  for (std::size_t k : {1u, 2u, 4u, 8u}) {
    auto view = limit_labeled_anomalies(ds.view(), k, 3);
    for (int rep = 0; rep < 20; ++rep) {
      auto batch = sample_batch(view, 2 * k, rng);
      std::set<const Graph*> uniq(batch.begin(), batch.end());
      EXPECT_EQ(uniq.size(), batch.size());
      EXPECT_EQ(batch.size(), 2 * k);
      const auto a = std::count_if(batch.begin(), batch.end(), [](const Graph* g) { return g->graph_label == 1; });
      EXPECT_EQ(static_cast<std::size_t>(a), k);
    }
  }
}

TEST(Features, AlignPadsToWidest) {
  auto a = generate_synthetic(10, 8, 0.3, 1);
  GraphDataset b = a;
  for (auto& g : b.graphs) g.features = degree_features(g.adjacency);
  b.feature_dim = 2;
  align_feature_dims({&a, &b});
  EXPECT_EQ(a.feature_dim, b.feature_dim);
  EXPECT_EQ(b.graphs[0].features.cols(), a.feature_dim);
  EXPECT_NO_THROW(b.validate());
}

}  // namespace
}  // namespace magad
