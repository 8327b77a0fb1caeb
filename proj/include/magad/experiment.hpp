#pragma once

#include <openssl/evp.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "magad/condensation.hpp"
#include "magad/meta.hpp"
#include "magad/metrics.hpp"
#include "magad/sampling.hpp"
#include "magad/synthetic.hpp"
#include "magad/tudataset.hpp"

namespace magad {

using json = nlohmann::ordered_json;

inline constexpr const char* kResplitAux = "resplit";

struct ExperimentConfig {
  Task task = Task::Graph;
  std::string target = "MUTAG";
  std::vector<std::string> aux;  // empty: the default set for the target
  MetaConfig meta;
  CondenseConfig condense;
  DeviationConfig deviation;  // q, margin, ref_seed and per_batch_reference are read; moments derive from them
  Eigen::Index D = 64;
  Eigen::Index hidden = 256;
  Eigen::Index head_hidden = 512;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  bool no_meta = false;
  bool no_condensation = false;
  bool fixed_split = false;
  double contamination = 0.0;
  std::size_t k_shot = 0;  // 0: every labeled anomaly in the train split
  std::array<double, 3> split = {0.4, 0.2, 0.4};
  // not part of the scored configuration
  std::string out = "runs";
  std::string data_dir;  // empty: MAGAD_DATA_DIR
  int workers = 1;

  void validate() const {
    auto scoped = [](const char* path, auto&& fn) {
      try {
        fn();
      } catch (const Error& e) {
        throw ConfigError(std::string(path) + ": " + e.what());
      }
    };
    scoped("config.meta", [&] { meta.validate(); });
    scoped("config.condense", [&] { condense.validate(); });
    if (deviation.q < 2) throw ConfigError("config.deviation.q: must be >= 2");
    if (!(deviation.margin > 0.0)) throw ConfigError("config.deviation.margin: must be positive");
    if (D < 1 || hidden < 1 || head_hidden < 1) throw ConfigError("config.model: D, hidden and head_hidden must be >= 1");
    if (seeds.empty()) throw ConfigError("config.seeds: at least one seed required");
    if (!(contamination >= 0.0 && contamination <= 0.2))
      throw ConfigError("config.contamination: must lie in [0, 0.2], got " + std::to_string(contamination));
    if (target.empty()) throw ConfigError("config.target: required");
    if (workers < 1) throw ConfigError("config.workers: must be >= 1");
    double total = 0.0;
    for (double f : split) {
      if (!(f >= 0.0)) throw ConfigError("config.split: fractions must be non-negative");
      total += f;
    }
    if (std::abs(total - 1.0) > 1e-9 || split[0] <= 0.0 || split[2] <= 0.0)
      throw ConfigError("config.split: fractions must sum to 1 with non-empty train and test parts");
  }

  DeviationConfig resolved_deviation() const {
    auto d = DeviationConfig::from_prior(deviation.q, deviation.margin, deviation.ref_seed);
    d.per_batch_reference = deviation.per_batch_reference;
    return d;
  }

  ModelShape shape(Eigen::Index input_dim) const { return {input_dim, hidden, D, head_hidden}; }
};

// ---------------------------------------------------------------------------
// JSON binding. Unknown fields and type mismatches are reported with their
// path before anything runs.

namespace detail {

class FieldReader {
 public:
  FieldReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string at(const std::string& key) const { return path_ + "." + key; }

  void get(const std::string& key, double& out) {
    if (const auto* v = find(key)) {
      if (!v->is_number()) throw ConfigError(at(key) + ": expected a number");
      out = v->get<double>();
    }
  }
  template <typename I>
    requires std::is_integral_v<I>
  void get(const std::string& key, I& out) {
    if (const auto* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(at(key) + ": expected an integer");
      if constexpr (std::is_unsigned_v<I>)
        if (v->get<long long>() < 0) throw ConfigError(at(key) + ": expected a non-negative integer");
      out = v->get<I>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (const auto* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(at(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const auto* v = find(key)) {
      if (!v->is_string()) throw ConfigError(at(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }
  void get(const std::string& key, std::vector<std::string>& out) {
    if (const auto* v = find(key)) {
      if (!v->is_array()) throw ConfigError(at(key) + ": expected an array of strings");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        if (!(*v)[i].is_string()) throw ConfigError(at(key) + "[" + std::to_string(i) + "]: expected a string");
        out.push_back((*v)[i].get<std::string>());
      }
    }
  }
  template <typename E>
  void get_enum(const std::string& key, E& out, E (*parse)(const std::string&)) {
    std::string s;
    get(key, s);
    if (s.empty()) return;
    try {
      out = parse(s);
    } catch (const Error& e) {
      throw ConfigError(at(key) + ": " + e.what());
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(path_ + "." + k + ": unknown field");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline json meta_to_json(const MetaConfig& m) {
  return {{"variant", variant_name(m.variant)},
          {"alpha", m.alpha},
          {"beta", m.beta},
          {"epsilon", m.epsilon},
          {"inner_steps", m.inner_steps},
          {"k_tasks", m.k_tasks},
          {"finetune_steps", m.finetune_steps},
          {"epochs", m.epochs},
          {"batch_size", m.batch_size},
          {"support_fraction", m.support_fraction},
          {"paper_literal_reptile", m.paper_literal_reptile},
          {"finetune_heads_only", m.finetune_heads_only}};
}

inline json condense_to_json(const CondenseConfig& c) {
  return {{"r", c.r},
          {"tau1", c.tau1},
          {"tau2", c.tau2},
          {"T", c.T},
          {"eta", c.eta},
          {"n_theta_samples", c.n_theta_samples},
          {"sigma_sparse", c.sigma_sparse},
          {"seed", c.seed},
          {"hidden", c.hidden},
          {"phi_hidden", c.phi_hidden},
          {"lr_features", c.lr_features},
          {"lr_phi", c.lr_phi},
          {"tol", c.tol}};
}

/// Everything that influences scores. Output location, data root and worker
/// count are left out so records are comparable across machines.
inline json to_json(const ExperimentConfig& c) {
  return {{"task", task_name(c.task)},
          {"target", c.target},
          {"aux", c.aux},
          {"meta", meta_to_json(c.meta)},
          {"condense", condense_to_json(c.condense)},
          {"deviation",
           {{"q", c.deviation.q},
            {"margin", c.deviation.margin},
            {"ref_seed", c.deviation.ref_seed},
            {"per_batch_reference", c.deviation.per_batch_reference}}},
          {"model", {{"D", c.D}, {"hidden", c.hidden}, {"head_hidden", c.head_hidden}}},
          {"seeds", c.seeds},
          {"no_meta", c.no_meta},
          {"no_condensation", c.no_condensation},
          {"fixed_split", c.fixed_split},
          {"contamination", c.contamination},
          {"k_shot", c.k_shot},
          {"split", c.split}};
}

/// Overlay `j` onto `base`. Accepts the keys produced by to_json plus out,
/// data_dir and workers; "seeds" may be a count or an explicit list.
inline ExperimentConfig config_from_json(const json& j, ExperimentConfig base = {}) {
  detail::FieldReader r(j, "config");
  r.get_enum("task", base.task, parse_task);
  r.get("target", base.target);
  r.get("aux", base.aux);
  r.get("out", base.out);
  r.get("data_dir", base.data_dir);
  r.get("workers", base.workers);
  r.get("no_meta", base.no_meta);
  r.get("no_condensation", base.no_condensation);
  r.get("fixed_split", base.fixed_split);
  r.get("contamination", base.contamination);
  r.get("k_shot", base.k_shot);
  if (const auto* s = r.find("seeds")) {
    if (s->is_number_integer() && s->get<long long>() >= 0) {
      base.seeds.resize(s->get<std::size_t>());
      std::iota(base.seeds.begin(), base.seeds.end(), 0);
    } else if (s->is_array()) {
      base.seeds.clear();
      for (std::size_t i = 0; i < s->size(); ++i) {
        if (!(*s)[i].is_number_unsigned()) throw ConfigError("config.seeds[" + std::to_string(i) + "]: expected a non-negative integer");
        base.seeds.push_back((*s)[i].get<std::uint64_t>());
      }
    } else {
      throw ConfigError("config.seeds: expected a count or a list of non-negative integers");
    }
  }
  if (const auto* s = r.find("split")) {
    if (!s->is_array() || s->size() != 3) throw ConfigError("config.split: expected three fractions");
    for (std::size_t i = 0; i < 3; ++i) {
      if (!(*s)[i].is_number()) throw ConfigError("config.split[" + std::to_string(i) + "]: expected a number");
      base.split[i] = (*s)[i].get<double>();
    }
  }
  if (const auto* m = r.find("meta")) {
    detail::FieldReader mr(*m, "config.meta");
    mr.get_enum("variant", base.meta.variant, parse_variant);
    mr.get("alpha", base.meta.alpha);
    mr.get("beta", base.meta.beta);
    mr.get("epsilon", base.meta.epsilon);
    mr.get("inner_steps", base.meta.inner_steps);
    mr.get("k_tasks", base.meta.k_tasks);
    mr.get("finetune_steps", base.meta.finetune_steps);
    mr.get("epochs", base.meta.epochs);
    mr.get("batch_size", base.meta.batch_size);
    mr.get("support_fraction", base.meta.support_fraction);
    mr.get("paper_literal_reptile", base.meta.paper_literal_reptile);
    mr.get("finetune_heads_only", base.meta.finetune_heads_only);
    mr.finish();
  }
  if (const auto* c = r.find("condense")) {
    detail::FieldReader cr(*c, "config.condense");
    auto& cc = base.condense;
    cr.get("r", cc.r);
    cr.get("tau1", cc.tau1);
    cr.get("tau2", cc.tau2);
    cr.get("T", cc.T);
    cr.get("eta", cc.eta);
    cr.get("n_theta_samples", cc.n_theta_samples);
    cr.get("sigma_sparse", cc.sigma_sparse);
    cr.get("seed", cc.seed);
    cr.get("hidden", cc.hidden);
    cr.get("phi_hidden", cc.phi_hidden);
    cr.get("lr_features", cc.lr_features);
    cr.get("lr_phi", cc.lr_phi);
    cr.get("tol", cc.tol);
    cr.finish();
  }
  if (const auto* d = r.find("deviation")) {
    detail::FieldReader dr(*d, "config.deviation");
    dr.get("q", base.deviation.q);
    dr.get("margin", base.deviation.margin);
    dr.get("ref_seed", base.deviation.ref_seed);
    dr.get("per_batch_reference", base.deviation.per_batch_reference);
    dr.finish();
  }
  if (const auto* m = r.find("model")) {
    detail::FieldReader mr(*m, "config.model");
    mr.get("D", base.D);
    mr.get("hidden", base.hidden);
    mr.get("head_hidden", base.head_hidden);
    mr.finish();
  }
  r.finish();
  return base;
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j, std::move(base));
}

// ---------------------------------------------------------------------------
// Content hashes

inline std::string sha1_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr) != 1) throw Error("sha1 digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

/// Same digest as `git hash-object`.
inline std::string git_blob_hash(std::string_view content) {
  std::string blob = "blob " + std::to_string(content.size());
  blob.push_back('\0');
  blob.append(content);
  return sha1_hex(blob);
}

inline std::string file_blob_hash(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IngestionError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return git_blob_hash(ss.str());
}

/// Hash of a canonical text rendering: structure, features and all labels.
inline std::string dataset_hash(const GraphDataset& ds) {
  std::ostringstream os;
  os << std::setprecision(17) << "dataset " << ds.feature_dim << ' ' << ds.size() << '\n';
  for (const auto& g : ds.graphs) {
    os << "graph " << g.id << ' ' << g.num_nodes() << ' ' << g.graph_label << ' ' << g.true_label << '\n';
    for (Eigen::Index i = 0; i < g.adjacency.rows(); ++i)
      for (Eigen::Index j = i + 1; j < g.adjacency.cols(); ++j)
        if (g.adjacency(i, j) != 0.0) os << i << ' ' << j << '\n';
    for (Eigen::Index i = 0; i < g.features.size(); ++i) os << g.features.data()[i] << ' ';
    os << "\nlabels";
    for (int l : g.node_labels) os << ' ' << l;
    os << "\nmask";
    for (int m : g.node_anomaly_mask) os << ' ' << m;
    os << '\n';
  }
  return git_blob_hash(os.str());
}

// ---------------------------------------------------------------------------
// Datasets

struct SyntheticSpec {
  std::size_t graphs = 200;
  std::size_t base_size = 12;
  double anomaly_fraction = 0.2;
  std::uint64_t seed = 0;

  std::string str() const {
    std::ostringstream os;
    os << "synthetic:" << graphs << ':' << base_size << ':' << anomaly_fraction << ':' << seed;
    return os.str();
  }
};

/// "synthetic[:graphs[:base_size[:fraction[:seed]]]]"
inline std::optional<SyntheticSpec> parse_synthetic_spec(const std::string& s) {
  if (s.rfind("synthetic", 0) != 0) return std::nullopt;
  if (s.size() > 9 && s[9] != ':') return std::nullopt;
  SyntheticSpec spec;
  std::vector<std::string> parts;
  std::stringstream ss(s.size() > 10 ? s.substr(10) : "");
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  if (parts.size() > 4) throw ConfigError("synthetic spec '" + s + "': at most four fields (graphs:base:fraction:seed)");
  try {
    std::size_t used = 0;
    auto whole = [&](const std::string& p) {
      const auto v = std::stoull(p, &used);
      if (used != p.size()) throw std::invalid_argument(p);
      return v;
    };
    if (parts.size() > 0) spec.graphs = whole(parts[0]);
    if (parts.size() > 1) spec.base_size = whole(parts[1]);
    if (parts.size() > 2) {
      spec.anomaly_fraction = std::stod(parts[2], &used);
      if (used != parts[2].size()) throw std::invalid_argument(parts[2]);
    }
    if (parts.size() > 3) spec.seed = whole(parts[3]);
  } catch (const std::logic_error&) {
    throw ConfigError("synthetic spec '" + s + "': fields must be numbers (graphs:base:fraction:seed)");
  }
  return spec;
}

struct LoadedDataset {
  std::string spec;
  GraphDataset data;
  json provenance;  // files and their git blob hashes, or the generator spec
  std::string content_hash;
  bool synthetic = false;
};

inline std::string resolve_data_dir(const std::string& configured) {
  if (!configured.empty()) return configured;
  if (const char* env = std::getenv("MAGAD_DATA_DIR")) return env;
  return {};
}

/// A dataset directory path, a TUDataset name under the data root (PTC-FM
/// and PTC_FM both resolve), or a synthetic spec.
inline LoadedDataset load_dataset(const std::string& spec, const std::string& data_dir) {
  namespace fs = std::filesystem;
  LoadedDataset out;
  out.spec = spec;
  if (auto syn = parse_synthetic_spec(spec)) {
    out.data = generate_synthetic(syn->graphs, syn->base_size, syn->anomaly_fraction, syn->seed);
    out.data.name = syn->str();
    out.synthetic = true;
    out.provenance = {{"spec", syn->str()}, {"generator", "planted-clique"}};
  } else {
    std::vector<fs::path> candidates{fs::path(spec)};
    const std::string root = resolve_data_dir(data_dir);
    if (!root.empty()) {
      candidates.push_back(fs::path(root) / spec);
      std::string underscored = spec;
      std::replace(underscored.begin(), underscored.end(), '-', '_');
      candidates.push_back(fs::path(root) / underscored);
    }
    std::optional<fs::path> dir;
    for (const auto& c : candidates)
      if (fs::is_directory(c)) {
        dir = c;
        break;
      }
    if (!dir)
      throw IngestionError("dataset '" + spec + "' not found" +
                           (root.empty() ? std::string(" (set MAGAD_DATA_DIR or pass a directory path)")
                                         : " under " + root));
    const std::string name = fs::path(*dir).lexically_normal().filename().string().empty()
                                 ? dir->parent_path().filename().string()
                                 : fs::path(*dir).lexically_normal().filename().string();
    out.data = parse_tudataset(*dir, name);
    json files = json::array();
    std::vector<fs::path> listed;
    for (const auto& e : fs::directory_iterator(*dir))
      if (e.is_regular_file() && e.path().filename().string().rfind(name + "_", 0) == 0) listed.push_back(e.path());
    std::sort(listed.begin(), listed.end());
    for (const auto& p : listed) files.push_back({{"file", p.filename().string()}, {"git_blob", file_blob_hash(p)}});
    out.provenance = {{"spec", spec}, {"directory", name}, {"files", files}};
  }
  if (!out.data.graphs.empty() && !out.data.graphs.front().has_node_labels()) assign_degree_labels(out.data, 5);
  out.content_hash = dataset_hash(out.data);
  return out;
}

// ---------------------------------------------------------------------------
// Prepared inputs: target and auxiliary datasets, feature dims aligned,
// condensed once per configuration and cached on disk.

struct PreparedInputs {
  LoadedDataset target;
  std::vector<std::string> aux_specs;        // resolved auxiliary list, defaults filled in
  std::vector<LoadedDataset> aux;            // explicit auxiliary datasets
  std::size_t resplit_folds = 0;             // auxiliaries carved from the target's validation split
  std::vector<CondensedGraph> target_records;  // empty without condensation
  std::vector<GraphDataset> aux_condensed;
  std::vector<std::string> notices;
};

/// Default auxiliaries: four fresh synthetic datasets for a synthetic target;
/// for a real one, the other benchmark datasets that exist locally, topped up
/// with validation-split folds.
inline std::vector<std::string> default_aux(const ExperimentConfig& cfg, std::vector<std::string>& notices) {
  std::vector<std::string> aux;
  const auto k = static_cast<std::size_t>(cfg.meta.k_tasks);
  if (auto syn = parse_synthetic_spec(cfg.target)) {
    for (std::size_t i = 1; i <= k; ++i) {
      SyntheticSpec s = *syn;
      s.seed = syn->seed + i;
      aux.push_back(s.str());
    }
    return aux;
  }
  const std::string root = resolve_data_dir(cfg.data_dir);
  std::string own = std::filesystem::path(cfg.target).filename().string();
  std::replace(own.begin(), own.end(), '-', '_');
  for (std::string name : {"AIDS", "MUTAG", "PTC_FM", "PTC_MM"}) {
    if (aux.size() == k) break;
    if (name == own || root.empty() || !std::filesystem::is_directory(std::filesystem::path(root) / name)) continue;
    aux.push_back(name);
  }
  while (aux.size() < k) aux.push_back(kResplitAux);
  if (std::count(aux.begin(), aux.end(), kResplitAux) > 0)
    notices.push_back(std::to_string(std::count(aux.begin(), aux.end(), kResplitAux)) +
                      " auxiliary set(s) taken as disjoint folds of the target's validation split");
  return aux;
}

inline std::filesystem::path cache_dir(const ExperimentConfig& cfg) { return std::filesystem::path(cfg.out) / "cache"; }

/// Condensed records for `ds`, read from the cache when present.
inline std::vector<CondensedGraph> condensed_records(const LoadedDataset& ds, const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  const std::string key = sha1_hex(ds.content_hash + condense_to_json(cfg.condense).dump());
  const fs::path path = cache_dir(cfg) / ("condensed-" + key.substr(0, 16) + ".txt");
  if (fs::exists(path)) return load_condensed(path.string());
  auto cd = condense_dataset(ds.data, cfg.condense);
  fs::create_directories(path.parent_path());
  // write then rename so a concurrent reader never sees a partial file
  const fs::path tmp = path.string() + ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  save_condensed(tmp.string(), cd.records);
  fs::rename(tmp, path);
  return std::move(cd.records);
}

inline PreparedInputs prepare_inputs(const ExperimentConfig& cfg) {
  cfg.validate();
  PreparedInputs in;
  in.target = load_dataset(cfg.target, cfg.data_dir);
  const bool needs_aux = !cfg.no_meta;
  std::vector<std::string> aux = cfg.aux.empty() && needs_aux ? default_aux(cfg, in.notices) : cfg.aux;
  if (needs_aux && aux.size() != static_cast<std::size_t>(cfg.meta.k_tasks))
    throw ConfigError("config.aux: " + std::to_string(aux.size()) + " auxiliary datasets but meta.k_tasks is " +
                      std::to_string(cfg.meta.k_tasks));
  in.aux_specs = aux;
  if (needs_aux)
    for (const auto& a : aux) {
      if (a == kResplitAux)
        ++in.resplit_folds;
      else
        in.aux.push_back(load_dataset(a, cfg.data_dir));
    }
  std::vector<GraphDataset*> all{&in.target.data};
  for (auto& a : in.aux) all.push_back(&a.data);
  align_feature_dims(all);
  // padding changes content; hash what is actually used
  for (auto* ld : std::vector<LoadedDataset*>{&in.target}) ld->content_hash = dataset_hash(ld->data);
  for (auto& a : in.aux) a.content_hash = dataset_hash(a.data);
  if (cfg.task == Task::Subgraph && !in.target.data.graphs.empty() && !in.target.data.graphs.front().has_node_mask())
    throw ConfigError("config.task: subgraph detection needs node anomaly masks, which " + cfg.target + " lacks");

  if (!cfg.no_condensation) {
    in.target_records = condensed_records(in.target, cfg);
    for (const auto& a : in.aux) in.aux_condensed.push_back(apply_condensed(a.data, condensed_records(a, cfg)));
  }
  return in;
}

// ---------------------------------------------------------------------------
// One seed of the pipeline

struct SeedResult {
  std::uint64_t seed = 0;
  EvalResult eval;
  double final_meta_loss = std::numeric_limits<double>::quiet_NaN();
  std::size_t train_graphs = 0;
  std::size_t train_anomalies = 0;
};

/// Stratified folds of `indices`, dealt round-robin per class after a shuffle.
inline std::vector<std::vector<std::size_t>> stratified_folds(const GraphDataset& ds, std::vector<std::size_t> indices,
                                                              std::size_t folds, std::uint64_t seed) {
  std::array<std::vector<std::size_t>, 2> cls;
  for (auto i : indices) cls[ds.graphs.at(i).graph_label == 1 ? 1 : 0].push_back(i);
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> out(folds);
  std::size_t next = 0;
  for (auto& c : cls) {
    rng.shuffle(c);
    for (auto i : c) out[next++ % folds].push_back(i);
  }
  for (auto& f : out) std::sort(f.begin(), f.end());
  return out;
}

inline GraphDataset subset(const GraphDataset& ds, const std::vector<std::size_t>& idx, const std::string& name) {
  GraphDataset out;
  out.name = name;
  out.feature_dim = ds.feature_dim;
  for (auto i : idx) out.graphs.push_back(ds.graphs.at(i));
  return out;
}

/// The ablation without meta-learning: epochs * inner_steps plain gradient
/// steps at rate alpha on batches of the target training graphs.
inline ModelParams direct_train(ModelParams theta, const GraphList& train, const MetaConfig& cfg,
                                const DeviationConfig& dev, std::uint64_t seed) {
  Rng rng(Rng::mix(seed) ^ 0xd1ec7ULL);
  const int steps = cfg.epochs * cfg.inner_steps;
  for (int s = 0; s < steps; ++s)
    theta = descend(std::move(theta), make_batch(sample_batch(train, cfg.batch_size, rng)), 1, cfg.alpha, false, cfg, dev,
                    "direct_train");
  return theta;
}

/// Everything one seed trains and tests on. Graph pointers refer into the
/// datasets held here, so instances are heap-allocated and never copied.
struct SeedData {
  DatasetSplit split;
  GraphDataset work;          // target after contamination
  GraphDataset train_source;  // condensed target, unless condensation is off
  GraphList train;
  GraphList test;  // original graphs
  std::vector<GraphDataset> folds;
  std::vector<const GraphDataset*> aux;

  SeedData() = default;
  SeedData(const SeedData&) = delete;
  SeedData& operator=(const SeedData&) = delete;
};

inline DatasetSplit seed_split(const ExperimentConfig& cfg, const GraphDataset& target, std::uint64_t seed) {
  return split_dataset(target, cfg.split, cfg.fixed_split ? 0 : Rng::mix(seed) ^ 0x5b117ULL);
}

inline std::unique_ptr<SeedData> seed_data(const ExperimentConfig& cfg, const PreparedInputs& in, std::uint64_t seed) {
  auto d = std::make_unique<SeedData>();
  const GraphDataset& target = in.target.data;
  d->split = seed_split(cfg, target, seed);
  d->work = cfg.contamination > 0.0 ? contaminate(target, d->split.train, cfg.contamination, seed) : target;
  d->train_source = cfg.no_condensation ? d->work : apply_condensed(d->work, in.target_records);
  d->train = d->train_source.view(d->split.train);
  if (cfg.k_shot > 0) d->train = limit_labeled_anomalies(d->train, cfg.k_shot, seed);
  d->test = d->work.view(d->split.test);
  if (!cfg.no_meta) {
    if (in.resplit_folds > 0) {
      const auto parts = stratified_folds(d->train_source, d->split.validation, in.resplit_folds, Rng::mix(seed) ^ 0xf01dULL);
      for (std::size_t f = 0; f < parts.size(); ++f)
        d->folds.push_back(subset(d->train_source, parts[f], target.name + "/fold" + std::to_string(f)));
    }
    for (std::size_t i = 0; i < in.aux.size(); ++i)
      d->aux.push_back(cfg.no_condensation ? &in.aux[i].data : &in.aux_condensed[i]);
    for (const auto& f : d->folds) d->aux.push_back(&f);
  }
  return d;
}

inline MetaConfig seed_meta_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  MetaConfig mc = cfg.meta;
  mc.seed = seed;
  mc.task = cfg.task;
  return mc;
}

inline ModelParams seed_init(const ExperimentConfig& cfg, const PreparedInputs& in, std::uint64_t seed) {
  Rng rng(Rng::mix(seed) ^ 0x7e7aULL);
  return init_params(cfg.shape(in.target.data.feature_dim), rng);
}

/// Meta-training, or direct training on the target when meta is off.
inline MetaState pretrain(const ExperimentConfig& cfg, const PreparedInputs& in, const SeedData& d, std::uint64_t seed) {
  const auto dev = cfg.resolved_deviation();
  const auto mc = seed_meta_config(cfg, seed);
  ModelParams theta = seed_init(cfg, in, seed);
  if (cfg.no_meta) return {direct_train(std::move(theta), d.train, mc, dev, seed), {}};
  return meta_train(d.aux, theta, mc, dev);
}

inline SeedResult run_seed(const ExperimentConfig& cfg, const PreparedInputs& in, std::uint64_t seed) {
  const auto d = seed_data(cfg, in, seed);
  SeedResult res;
  res.seed = seed;
  res.train_graphs = d->train.size();
  for (const auto* g : d->train) res.train_anomalies += static_cast<std::size_t>(g->graph_label);
  const auto st = pretrain(cfg, in, *d, seed);
  if (!st.history.empty()) res.final_meta_loss = st.history.back();
  const auto theta = finetune(st.theta, d->train, seed_meta_config(cfg, seed), cfg.resolved_deviation());
  res.eval = evaluate(theta, d->test, cfg.task);
  return res;
}

/// Runs `n` independent jobs on up to `workers` threads. Results land in
/// their own slots, so ordering never depends on scheduling.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& job) {
  const auto w = std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), n);
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex m;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < w; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(m);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

struct RowResult {
  std::string label;
  ExperimentConfig config;
  std::vector<SeedResult> seeds;
  EvalResult summary;
  std::string skipped;  // reason, when the row could not run
};

inline RowResult run_battery(const ExperimentConfig& cfg, const std::string& label, const PreparedInputs& in) {
  RowResult row;
  row.label = label;
  row.config = cfg;
  row.config.aux = in.aux_specs;
  row.seeds.resize(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), cfg.workers, [&](std::size_t i) { row.seeds[i] = run_seed(cfg, in, cfg.seeds[i]); });
  std::vector<EvalResult> evals;
  for (const auto& s : row.seeds) evals.push_back(s.eval);
  row.summary = aggregate(evals);
  return row;
}

inline RowResult run_battery(const ExperimentConfig& cfg, const std::string& label = "full") {
  return run_battery(cfg, label, prepare_inputs(cfg));
}

// ---------------------------------------------------------------------------
// Sweeps

/// Rows for k in `ks`, batch size 2k. A k larger than some seed's labeled
/// anomaly count gives a skipped row.
inline std::vector<RowResult> kshot_sweep(const ExperimentConfig& cfg, const std::vector<std::size_t>& ks) {
  const auto in = prepare_inputs(cfg);
  std::vector<RowResult> rows;
  for (auto k : ks) {
    if (k < 1) throw ConfigError("kshot: k must be >= 1");
    ExperimentConfig c = cfg;
    c.k_shot = k;
    c.meta.batch_size = 2 * k;
    const std::string label = std::to_string(k) + "-shot";
    std::size_t fewest = std::numeric_limits<std::size_t>::max();
    for (auto s : cfg.seeds) {
      const auto split = seed_split(cfg, in.target.data, s);
      const GraphDataset work =
          cfg.contamination > 0.0 ? contaminate(in.target.data, split.train, cfg.contamination, s) : in.target.data;
      std::size_t n = 0;
      for (auto i : split.train) n += static_cast<std::size_t>(work.graphs[i].graph_label);
      fewest = std::min(fewest, n);
    }
    if (k > fewest) {
      RowResult skipped;
      skipped.label = label;
      skipped.config = c;
      skipped.skipped = "k=" + std::to_string(k) + " exceeds the " + std::to_string(fewest) +
                        " labeled anomalies available in the smallest train split";
      rows.push_back(std::move(skipped));
      continue;
    }
    rows.push_back(run_battery(c, label, in));
  }
  return rows;
}

enum class SweepParam { D, A, R, Contamination };

inline SweepParam parse_sweep_param(const std::string& s) {
  if (s == "D") return SweepParam::D;
  if (s == "a") return SweepParam::A;
  if (s == "r") return SweepParam::R;
  if (s == "contamination") return SweepParam::Contamination;
  throw ConfigError("--param: expected D, a, r or contamination, got '" + s + "'");
}

inline const char* sweep_param_name(SweepParam p) {
  switch (p) {
    case SweepParam::D: return "D";
    case SweepParam::A: return "a";
    case SweepParam::R: return "r";
    case SweepParam::Contamination: return "contamination";
  }
  return "?";
}

/// `cfg` with one parameter replaced; throws ConfigError with the legal range.
inline ExperimentConfig with_param(ExperimentConfig cfg, SweepParam p, double v) {
  auto whole = [&](const char* name, double lo) {
    if (!(v >= lo) || v != std::floor(v))
      throw ConfigError(std::string("sweep ") + name + ": values must be integers >= " + std::to_string(int(lo)) +
                        ", got " + std::to_string(v));
    return static_cast<long>(v);
  };
  switch (p) {
    case SweepParam::D: cfg.D = whole("D", 1); break;
    case SweepParam::A: {
      const auto a = whole("a", 1);
      if (!cfg.aux.empty()) {
        if (static_cast<std::size_t>(a) > cfg.aux.size())
          throw ConfigError("sweep a: " + std::to_string(a) + " exceeds the " + std::to_string(cfg.aux.size()) +
                            " configured auxiliary datasets");
        cfg.aux.resize(static_cast<std::size_t>(a));
      }
      cfg.meta.k_tasks = static_cast<int>(a);
      break;
    }
    case SweepParam::R:
      if (!(v > 0.0 && v <= 1.0)) throw ConfigError("sweep r: values must lie in (0, 1], got " + std::to_string(v));
      cfg.condense.r = v;
      break;
    case SweepParam::Contamination:
      if (!(v >= 0.0 && v <= 0.2))
        throw ConfigError("sweep contamination: values must lie in [0, 0.2], got " + std::to_string(v));
      cfg.contamination = v;
      break;
  }
  return cfg;
}

inline std::string format_value(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

inline std::vector<RowResult> sensitivity_sweep(const ExperimentConfig& cfg, SweepParam p, const std::vector<double>& values) {
  if (values.empty()) throw ConfigError("--values: at least one value required");
  std::vector<ExperimentConfig> cells;
  for (double v : values) cells.push_back(with_param(cfg, p, v));  // reject bad values before any compute
  std::vector<RowResult> rows;
  for (std::size_t i = 0; i < cells.size(); ++i)
    rows.push_back(run_battery(cells[i], std::string(sweep_param_name(p)) + "=" + format_value(values[i])));
  return rows;
}

inline std::vector<RowResult> ablation(const ExperimentConfig& cfg) {
  ExperimentConfig full = cfg, no_meta = cfg, no_cond = cfg;
  full.no_meta = full.no_condensation = false;
  no_meta.no_meta = true;
  no_meta.no_condensation = false;
  no_cond.no_meta = false;
  no_cond.no_condensation = true;
  return {run_battery(full, "full"), run_battery(no_meta, "w/o meta"), run_battery(no_cond, "w/o condensation")};
}

// ---------------------------------------------------------------------------
// Reports

/// One JSON line per seed. Carries the full scored configuration narrowed to
/// that seed, so each line can be re-run on its own.
inline std::string seed_record(const RowResult& row, const SeedResult& s) {
  ExperimentConfig c = row.config;
  c.seeds = {s.seed};
  json r = {{"row", row.label},
            {"seed", s.seed},
            {"task", task_name(c.task)},
            {"auc", s.eval.auc},
            {"n_pos", s.eval.n_pos},
            {"n_neg", s.eval.n_neg},
            {"train_graphs", s.train_graphs},
            {"train_anomalies", s.train_anomalies},
            {"final_meta_loss", std::isfinite(s.final_meta_loss) ? json(s.final_meta_loss) : json(nullptr)},
            {"config", to_json(c)}};
  return r.dump();
}

inline std::string summary_table(const std::vector<RowResult>& rows) {
  std::size_t w = 5;
  for (const auto& r : rows) w = std::max(w, r.label.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w)) << "row" << "  " << std::setw(8) << "mean" << "  " << std::setw(8)
     << "std" << "  seeds\n";
  os << std::string(w + 27, '-') << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(w)) << r.label << "  ";
    if (!r.skipped.empty()) {
      os << "skipped: " << r.skipped << '\n';
      continue;
    }
    os << std::setw(8) << r.summary.mean << "  " << std::setw(8) << r.summary.std << "  " << r.seeds.size() << '\n';
  }
  return os.str();
}

inline json summary_json(const std::vector<RowResult>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    json j = {{"row", r.label}};
    if (!r.skipped.empty()) {
      j["skipped"] = r.skipped;
    } else {
      j["mean_auc"] = r.summary.mean;
      j["std_auc"] = r.summary.std;
      j["per_seed"] = r.summary.per_seed;
    }
    out.push_back(j);
  }
  return out;
}

inline json input_manifest(const ExperimentConfig& cfg) {
  // hashes of the raw inputs, before any padding
  json inputs = json::array();
  std::vector<std::string> specs{cfg.target};
  std::vector<std::string> notices;
  const auto aux = cfg.aux.empty() && !cfg.no_meta ? default_aux(cfg, notices) : cfg.aux;
  for (const auto& a : aux)
    if (a != kResplitAux && std::find(specs.begin(), specs.end(), a) == specs.end()) specs.push_back(a);
  for (const auto& s : specs) {
    const auto ds = load_dataset(s, cfg.data_dir);
    json j = ds.provenance;
    j["content_hash"] = ds.content_hash;
    inputs.push_back(j);
  }
  return inputs;
}

/// Writes manifest.json, records.jsonl, summary.json and summary.txt under
/// cfg.out. Returns the table text.
inline std::string write_reports(const ExperimentConfig& cfg, const std::string& command, const std::vector<RowResult>& rows) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out);
  json manifest = {{"tool", "magad"},
                   {"format", 1},
                   {"command", command},
                   {"config", to_json(cfg)},
                   {"seeds", cfg.seeds},
                   {"inputs", input_manifest(cfg)},
                   {"rows", json::array()}};
  for (const auto& r : rows) manifest["rows"].push_back({{"row", r.label}, {"config", to_json(r.config)}});
  std::ostringstream records;
  for (const auto& r : rows)
    for (const auto& s : r.seeds) records << seed_record(r, s) << '\n';
  manifest["records_git_blob"] = git_blob_hash(records.str());

  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream os(fs::path(cfg.out) / name, std::ios::binary);
    if (!os) throw IngestionError("cannot write " + (fs::path(cfg.out) / name).string());
    os << text;
  };
  const std::string table = summary_table(rows);
  write("records.jsonl", records.str());
  write("manifest.json", manifest.dump(2) + "\n");
  write("summary.json", summary_json(rows).dump(2) + "\n");
  write("summary.txt", table);
  return table;
}

}  // namespace magad
