#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "magad/experiment.hpp"

namespace magad {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("magad_test_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig tiny(const std::string& name) {
  ExperimentConfig c;
  c.target = "synthetic:40:8:0.25:1";
  c.D = 8;
  c.hidden = 16;
  c.head_hidden = 16;
  c.seeds = {0, 1};
  c.meta.epochs = 3;
  c.meta.k_tasks = 2;
  c.condense.tau1 = 2;
  c.condense.tau2 = 2;
  c.condense.T = 3;
  c.out = scratch(name).string();
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c = tiny("roundtrip");
  c.task = Task::Subgraph;
  c.aux = {"synthetic:10", "resplit"};
  c.meta.variant = Variant::Reptile;
  c.contamination = 0.1;
  c.k_shot = 3;
  c.seeds = {4, 9};
  const auto back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_EQ(back.seeds, (std::vector<std::uint64_t>{4, 9}));
}

TEST(Config, SeedCountExpandsToRange) {
  const auto c = config_from_json(json::parse(R"({"seeds": 3})"));
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{0, 1, 2}));
}

TEST(Config, ErrorsNameTheField) {
  auto message = [](const char* text) {
    try {
      config_from_json(json::parse(text)).validate();
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message(R"({"meta": {"alphaa": 1}})").find("config.meta.alphaa"), std::string::npos);
  EXPECT_NE(message(R"({"meta": {"epochs": "ten"}})").find("config.meta.epochs"), std::string::npos);
  EXPECT_NE(message(R"({"model": {"D": 1.5}})").find("config.model.D"), std::string::npos);
  EXPECT_NE(message(R"({"bogus": true})").find("config.bogus"), std::string::npos);
  EXPECT_NE(message(R"({"task": "edge"})").find("config.task"), std::string::npos);
  EXPECT_NE(message(R"({"contamination": 0.3})").find("config.contamination"), std::string::npos);
  EXPECT_NE(message(R"({"seeds": [1, -2]})").find("config.seeds[1]"), std::string::npos);
  EXPECT_NE(message(R"({"split": [0.5, 0.5, 0.5]})").find("config.split"), std::string::npos);
  EXPECT_EQ(message(R"({"meta": {"alpha": 0.02}})"), "no error");
}

TEST(Config, RecordsOmitMachineSettings) {
  ExperimentConfig c;
  c.out = "/somewhere";
  c.data_dir = "/data";
  c.workers = 4;
  const auto j = to_json(c);
  EXPECT_FALSE(j.contains("out"));
  EXPECT_FALSE(j.contains("data_dir"));
  EXPECT_FALSE(j.contains("workers"));
}

TEST(Hashing, GitBlobKnownValues) {
  EXPECT_EQ(git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
  EXPECT_EQ(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  EXPECT_EQ(sha1_hex("abc"), "a9993e364706816aba3e25717850c26c9cd0d89d");
}

TEST(Hashing, DatasetHashTracksContent) {
  auto a = generate_synthetic(10, 6, 0.3, 1);
  const auto b = generate_synthetic(10, 6, 0.3, 1);
  EXPECT_EQ(dataset_hash(a), dataset_hash(b));
  a.graphs[2].features(0, 0) += 1.0;
  EXPECT_NE(dataset_hash(a), dataset_hash(b));
}

TEST(SyntheticSpecParse, FieldsAndErrors) {
  EXPECT_FALSE(parse_synthetic_spec("MUTAG").has_value());
  EXPECT_FALSE(parse_synthetic_spec("synthetics").has_value());
  const auto d = parse_synthetic_spec("synthetic");
  ASSERT_TRUE(d.has_value());
  EXPECT_EQ(d->graphs, 200u);
  const auto s = parse_synthetic_spec("synthetic:40:8:0.25:7");
  ASSERT_TRUE(s.has_value());
  EXPECT_EQ(s->graphs, 40u);
  EXPECT_EQ(s->base_size, 8u);
  EXPECT_EQ(s->anomaly_fraction, 0.25);
  EXPECT_EQ(s->seed, 7u);
  EXPECT_EQ(parse_synthetic_spec(s->str())->str(), s->str());
  EXPECT_THROW(parse_synthetic_spec("synthetic:4x"), ConfigError);
  EXPECT_THROW(parse_synthetic_spec("synthetic:1:2:0.1:3:4"), ConfigError);
}

TEST(DefaultAux, SyntheticTargetGetsFreshSeeds) {
  ExperimentConfig c;
  c.target = "synthetic:40:8:0.25:5";
  c.meta.k_tasks = 3;
  std::vector<std::string> notices;
  EXPECT_EQ(default_aux(c, notices),
            (std::vector<std::string>{"synthetic:40:8:0.25:6", "synthetic:40:8:0.25:7", "synthetic:40:8:0.25:8"}));
  EXPECT_TRUE(notices.empty());
}

TEST(DefaultAux, MissingRealDatasetsFallBackToResplit) {
  ExperimentConfig c;
  c.target = "MUTAG";
  c.data_dir = scratch("empty_root").string();
  fs::create_directories(c.data_dir);
  std::vector<std::string> notices;
  const auto aux = default_aux(c, notices);
  EXPECT_EQ(aux, std::vector<std::string>(4, kResplitAux));
  EXPECT_EQ(notices.size(), 1u);
}

TEST(StratifiedFolds, DisjointCoverWithBalancedClasses) {
  const auto ds = generate_synthetic(60, 6, 0.25, 3);
  std::vector<std::size_t> idx(ds.graphs.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto folds = stratified_folds(ds, idx, 4, 11);
  ASSERT_EQ(folds.size(), 4u);
  std::vector<std::size_t> all;
  for (const auto& f : folds) {
    std::size_t anomalies = 0;
    for (auto i : f) anomalies += static_cast<std::size_t>(ds.graphs[i].graph_label);
    EXPECT_GE(anomalies, 3u);
    EXPECT_LE(anomalies, 4u);
    all.insert(all.end(), f.begin(), f.end());
  }
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, idx);
}

TEST(Pipeline, DegenerateRunReportsAuc) {
  auto c = tiny("degenerate");
  c.no_meta = true;
  c.no_condensation = true;
  const auto row = run_battery(c);
  ASSERT_EQ(row.seeds.size(), 2u);
  for (const auto& s : row.seeds) {
    EXPECT_GE(s.eval.auc, 0.0);
    EXPECT_LE(s.eval.auc, 1.0);
    EXPECT_EQ(s.eval.n_pos + s.eval.n_neg, 16u);
  }
  EXPECT_EQ(row.summary.per_seed.size(), 2u);
}

TEST(Pipeline, ContaminationFlipsOnlyTrainLabels) {
  const auto c = tiny("contam");
  const auto ds = generate_synthetic(40, 8, 0.25, 1);
  const auto split = seed_split(c, ds, 0);
  const auto zero = contaminate(ds, split.train, 0.0, 0);
  EXPECT_EQ(dataset_hash(zero), dataset_hash(ds));
  const auto dirty = contaminate(ds, split.train, 0.2, 0);
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < ds.graphs.size(); ++i) {
    EXPECT_EQ(dirty.graphs[i].true_label, ds.graphs[i].true_label);
    if (dirty.graphs[i].graph_label != ds.graphs[i].graph_label) {
      ++flipped;
      EXPECT_NE(std::find(split.train.begin(), split.train.end(), i), split.train.end());
    }
  }
  EXPECT_GT(flipped, 0u);
}

TEST(Pipeline, RecordsAreByteIdenticalAcrossRuns) {
  auto c = tiny("records_a");
  const auto first = write_reports(c, "test", {run_battery(c)});
  const auto a = slurp(fs::path(c.out) / "records.jsonl");
  c.out = scratch("records_b").string();
  c.workers = 2;
  write_reports(c, "test", {run_battery(c)});
  const auto b = slurp(fs::path(c.out) / "records.jsonl");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, b);
  EXPECT_NE(first.find("full"), std::string::npos);
}

TEST(Pipeline, RecordCarriesResolvedConfig) {
  auto c = tiny("resolved");
  c.seeds = {3};
  const auto row = run_battery(c);
  const auto rec = json::parse(seed_record(row, row.seeds[0]));
  EXPECT_EQ(rec["seed"], 3);
  EXPECT_EQ(rec["config"]["aux"].size(), 2u);
  EXPECT_EQ(rec["config"]["seeds"], json::array({3}));
  // re-running the record's config reproduces its score
  const auto again = run_battery(config_from_json(rec["config"], c));
  EXPECT_EQ(again.seeds[0].eval.auc, rec["auc"].get<double>());
}

TEST(Sweeps, KshotSkipsOversizedK) {
  auto c = tiny("kshot");
  c.seeds = {0};
  c.no_condensation = true;
  const auto rows = kshot_sweep(c, {1, 1000});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_TRUE(rows[0].skipped.empty());
  EXPECT_EQ(rows[0].config.meta.batch_size, 2);
  EXPECT_FALSE(rows[1].skipped.empty());
  EXPECT_NE(summary_table(rows).find("skipped"), std::string::npos);
  EXPECT_THROW(kshot_sweep(c, {0}), ConfigError);
}

TEST(Sweeps, RejectsIllegalValuesBeforeRunning) {
  const auto c = tiny("illegal");
  EXPECT_THROW(sensitivity_sweep(c, SweepParam::Contamination, {0.0, 0.3}), ConfigError);
  EXPECT_THROW(sensitivity_sweep(c, SweepParam::R, {0.0}), ConfigError);
  EXPECT_THROW(sensitivity_sweep(c, SweepParam::D, {2.5}), ConfigError);
  EXPECT_THROW(sensitivity_sweep(c, SweepParam::A, {}), ConfigError);
  EXPECT_THROW(parse_sweep_param("beta"), ConfigError);
  EXPECT_FALSE(fs::exists(fs::path(c.out) / "cache"));
}

TEST(Sweeps, OneRowPerValue) {
  auto c = tiny("sweep");
  c.seeds = {0};
  c.no_condensation = true;
  const auto rows = sensitivity_sweep(c, SweepParam::D, {4, 8});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].label, "D=4");
  EXPECT_EQ(rows[1].config.D, 8);
}

TEST(Sweeps, AblationHasThreeRows) {
  auto c = tiny("ablation");
  c.seeds = {0};
  const auto rows = ablation(c);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].label, "full");
  EXPECT_TRUE(rows[1].config.no_meta);
  EXPECT_TRUE(rows[2].config.no_condensation);
  EXPECT_FALSE(rows[0].config.no_meta || rows[0].config.no_condensation);
}

TEST(Parallel, PropagatesFailures) {
  std::vector<int> hit(8, 0);
  parallel_for(8, 3, [&](std::size_t i) { hit[i] = 1; });
  EXPECT_EQ(std::count(hit.begin(), hit.end(), 1), 8);
  EXPECT_THROW(parallel_for(4, 2, [](std::size_t i) {
                 if (i == 2) throw ArgumentError("boom");
               }),
               ArgumentError);
}

}  // namespace
}  // namespace magad
