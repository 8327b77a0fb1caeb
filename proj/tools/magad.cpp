// magad: experiment runner for condensation + meta-learned graph anomaly detection.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "magad/experiment.hpp"

namespace fs = std::filesystem;
using namespace magad;

namespace {

struct Options {
  std::string config;
  std::string task;
  std::string target;
  std::string aux;
  std::string variant;
  std::string out;
  std::string data_dir;
  std::size_t seeds = 0;
  int workers = 0;
  bool no_meta = false;
  bool no_condensation = false;
  bool paper_literal_reptile = false;
  bool fixed_split = false;
  std::string checkpoint;
  std::size_t k = 8;
  std::string param;
  std::string values;
  // gen-synthetic
  std::size_t graphs = 200;
  std::size_t base_size = 12;
  double fraction = 0.2;
  std::uint64_t seed = 0;
  std::string name = "SYNTH";
};

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "JSON config; flags override its values");
  cmd->add_option("--task", o.task, "graph|subgraph");
  cmd->add_option("--target", o.target, "Dataset directory, name under MAGAD_DATA_DIR, or synthetic:N:base:frac:seed");
  cmd->add_option("--aux", o.aux, "Comma-separated auxiliary datasets ('resplit' = validation fold of the target)");
  cmd->add_option("--variant", o.variant, "maml|anil|reptile");
  cmd->add_option("--seeds", o.seeds, "Run seeds 0..N-1");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--data-dir", o.data_dir, "Dataset root (default: MAGAD_DATA_DIR)");
  cmd->add_option("--workers", o.workers, "Seeds run concurrently");
  cmd->add_flag("--no-meta", o.no_meta, "Train directly on the target instead of meta-training");
  cmd->add_flag("--no-condensation", o.no_condensation, "Use the original graphs");
  cmd->add_flag("--paper-literal-reptile", o.paper_literal_reptile, "Reptile update that subtracts eps * mean(theta' - theta)");
  cmd->add_flag("--fixed-split", o.fixed_split, "Same train/validation/test split for every seed");
}

ExperimentConfig resolve(const Options& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  try {
    if (!o.task.empty()) cfg.task = parse_task(o.task);
    if (!o.variant.empty()) cfg.meta.variant = parse_variant(o.variant);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (!o.target.empty()) cfg.target = o.target;
  if (!o.aux.empty()) {
    cfg.aux = split_csv(o.aux);
    cfg.meta.k_tasks = static_cast<int>(cfg.aux.size());
  }
  if (!o.out.empty()) cfg.out = o.out;
  if (!o.data_dir.empty()) cfg.data_dir = o.data_dir;
  if (o.seeds > 0) {
    cfg.seeds.resize(o.seeds);
    std::iota(cfg.seeds.begin(), cfg.seeds.end(), 0);
  }
  if (o.workers > 0) cfg.workers = o.workers;
  cfg.no_meta = cfg.no_meta || o.no_meta;
  cfg.no_condensation = cfg.no_condensation || o.no_condensation;
  cfg.meta.paper_literal_reptile = cfg.meta.paper_literal_reptile || o.paper_literal_reptile;
  cfg.fixed_split = cfg.fixed_split || o.fixed_split;
  cfg.validate();
  return cfg;
}

void print_notices(const PreparedInputs& in) {
  for (const auto& n : in.notices) std::cerr << "note: " << n << '\n';
}

std::string command_line(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

int cmd_condense(const Options& o) {
  auto cfg = resolve(o);
  auto ds = load_dataset(cfg.target, cfg.data_dir);
  const auto cd = condense_dataset(ds.data, cfg.condense);
  fs::create_directories(cfg.out);
  const auto path = fs::path(cfg.out) / "condensed.txt";
  save_condensed(path.string(), cd.records);
  std::cout << "condensed " << cd.records.size() << " graphs (" << cd.bypassed << " bypassed), matching distance "
            << cd.initial_distance << " -> " << cd.final_distance << "\nwrote " << path.string() << '\n';
  return 0;
}

int cmd_meta_train(const Options& o) {
  auto cfg = resolve(o);
  if (cfg.no_meta) throw ConfigError("meta-train: --no-meta leaves nothing to do");
  const auto in = prepare_inputs(cfg);
  print_notices(in);
  const auto seed = cfg.seeds.front();
  const auto d = seed_data(cfg, in, seed);
  const auto st = pretrain(cfg, in, *d, seed);
  fs::create_directories(cfg.out);
  const auto path = fs::path(cfg.out) / "checkpoint.txt";
  save_checkpoint(path.string(), st);
  std::cout << variant_name(cfg.meta.variant) << ": " << st.history.size() << " epochs, final query loss "
            << (st.history.empty() ? 0.0 : st.history.back()) << "\nwrote " << path.string() << '\n';
  return 0;
}

int cmd_finetune(const Options& o) {
  auto cfg = resolve(o);
  cfg.no_meta = true;  // the checkpoint replaces meta-training
  const auto in = prepare_inputs(cfg);
  const auto seed = cfg.seeds.front();
  const auto d = seed_data(cfg, in, seed);
  auto st = load_checkpoint(o.checkpoint);
  st.theta = finetune(st.theta, d->train, seed_meta_config(cfg, seed), cfg.resolved_deviation());
  fs::create_directories(cfg.out);
  const auto path = fs::path(cfg.out) / "finetuned.txt";
  save_checkpoint(path.string(), st);
  std::cout << "fine-tuned " << cfg.meta.finetune_steps << " steps on " << d->train.size() << " graphs\nwrote "
            << path.string() << '\n';
  return 0;
}

int cmd_evaluate(const Options& o) {
  auto cfg = resolve(o);
  cfg.no_meta = true;
  cfg.no_condensation = true;  // only the original test graphs are needed
  const auto in = prepare_inputs(cfg);
  const auto st = load_checkpoint(o.checkpoint);
  json results = json::array();
  std::vector<double> aucs;
  for (auto seed : cfg.seeds) {
    const auto d = seed_data(cfg, in, seed);
    const auto r = evaluate(st.theta, d->test, cfg.task);
    aucs.push_back(r.auc);
    results.push_back({{"seed", seed}, {"auc", r.auc}, {"n_pos", r.n_pos}, {"n_neg", r.n_neg}});
    std::cout << "seed " << seed << "  auc " << r.auc << '\n';
  }
  const auto ms = mean_std(aucs);
  std::cout << "mean " << ms.mean << "  std " << ms.std << '\n';
  fs::create_directories(cfg.out);
  std::ofstream(fs::path(cfg.out) / "evaluation.json") << json{{"task", task_name(cfg.task)}, {"results", results}}.dump(2) << '\n';
  return 0;
}

int report(const ExperimentConfig& cfg, const std::string& command, const std::vector<RowResult>& rows) {
  std::cout << write_reports(cfg, command, rows);
  std::cout << "reports in " << cfg.out << '\n';
  return 0;
}

int cmd_run(const Options& o, const std::string& command) {
  auto cfg = resolve(o);
  const auto in = prepare_inputs(cfg);
  print_notices(in);
  return report(cfg, command, {run_battery(cfg, "full", in)});
}

int cmd_kshot(const Options& o, const std::string& command) {
  auto cfg = resolve(o);
  std::vector<std::size_t> ks;
  for (std::size_t k = 1; k <= o.k; k *= 2) ks.push_back(k);
  const auto rows = kshot_sweep(cfg, ks);
  for (const auto& r : rows)
    if (!r.skipped.empty()) std::cerr << "note: " << r.label << " skipped: " << r.skipped << '\n';
  report(cfg, command, rows);
  std::vector<double> x, y;
  for (const auto& r : rows)
    if (r.skipped.empty()) {
      x.push_back(static_cast<double>(r.config.k_shot));
      y.push_back(r.summary.mean);
    }
  if (x.size() >= 2) {
    try {
      std::cout << "spearman(k, mean auc) = " << spearman(x, y) << '\n';
    } catch (const MetricError& e) {
      std::cout << "spearman(k, mean auc) undefined: " << e.what() << '\n';
    }
  }
  return 0;
}

int cmd_sweep(const Options& o, const std::string& command) {
  auto cfg = resolve(o);
  if (o.param.empty()) throw ConfigError("sweep: --param is required");
  if (o.values.empty()) throw ConfigError("sweep: --values is required");
  const auto param = parse_sweep_param(o.param);
  std::vector<double> values;
  for (const auto& v : split_csv(o.values)) {
    std::size_t used = 0;
    double x = 0.0;
    try {
      x = std::stod(v, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used != v.size() || v.empty()) throw ConfigError("--values: '" + v + "' is not a number");
    values.push_back(x);
  }
  return report(cfg, command, sensitivity_sweep(cfg, param, values));
}

int cmd_ablate(const Options& o, const std::string& command) {
  const auto cfg = resolve(o);
  return report(cfg, command, ablation(cfg));
}

int cmd_gen_synthetic(const Options& o) {
  if (o.out.empty()) throw ConfigError("gen-synthetic: --out is required");
  auto ds = generate_synthetic(o.graphs, o.base_size, o.fraction, o.seed);
  ds.name = o.name;
  const auto dir = fs::path(o.out) / o.name;
  write_tudataset(ds, dir);
  std::cout << "wrote " << ds.size() << " graphs (" << ds.num_anomalous() << " anomalous) to " << dir.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph condensation + meta-learning for few-shot graph anomaly detection"};
  app.require_subcommand(1);
  Options o;

  auto* condense = app.add_subcommand("condense", "Condense every graph of the target dataset");
  auto* meta_train = app.add_subcommand("meta-train", "Meta-train on the auxiliary datasets, write a checkpoint");
  auto* finetune = app.add_subcommand("finetune", "Fine-tune a checkpoint on the target train split");
  auto* evaluate = app.add_subcommand("evaluate", "ROC-AUC of a checkpoint on the target test split");
  auto* run = app.add_subcommand("run", "Full pipeline over all seeds");
  auto* kshot = app.add_subcommand("kshot", "k-shot sweep, k = 1, 2, 4, ... up to --k");
  auto* sweep = app.add_subcommand("sweep", "Sensitivity sweep over one parameter");
  auto* ablate = app.add_subcommand("ablate", "Full model against w/o meta and w/o condensation");
  auto* gen = app.add_subcommand("gen-synthetic", "Write a planted-clique dataset in TUDataset format");

  for (auto* c : {condense, meta_train, finetune, evaluate, run, kshot, sweep, ablate}) add_common(c, o);
  for (auto* c : {finetune, evaluate}) c->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  kshot->add_option("--k", o.k, "Largest k (powers of two from 1)");
  sweep->add_option("--param", o.param, "D|a|r|contamination");
  sweep->add_option("--values", o.values, "Comma-separated values");
  gen->add_option("--out", o.out, "Output root; the dataset goes to OUT/NAME")->required();
  gen->add_option("--name", o.name, "Dataset name");
  gen->add_option("--graphs", o.graphs, "Number of graphs");
  gen->add_option("--base-size", o.base_size, "Nodes per graph");
  gen->add_option("--fraction", o.fraction, "Anomalous fraction");
  gen->add_option("--seed", o.seed, "Generator seed");

  CLI11_PARSE(app, argc, argv);
  const std::string command = command_line(argc, argv);
  try {
    if (condense->parsed()) return cmd_condense(o);
    if (meta_train->parsed()) return cmd_meta_train(o);
    if (finetune->parsed()) return cmd_finetune(o);
    if (evaluate->parsed()) return cmd_evaluate(o);
    if (run->parsed()) return cmd_run(o, command);
    if (kshot->parsed()) return cmd_kshot(o, command);
    if (sweep->parsed()) return cmd_sweep(o, command);
    if (ablate->parsed()) return cmd_ablate(o, command);
    if (gen->parsed()) return cmd_gen_synthetic(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
