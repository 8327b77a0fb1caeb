#pragma once

// Episodic meta-training (second-order MAML, ANIL, Reptile) and fine-tuning
// of the anomaly detector on the target graphs.

#include <fstream>
#include <iomanip>
#include <sstream>

#include "magad/sampling.hpp"
#include "magad/scoring.hpp"

namespace magad {

enum class Variant { Maml, Anil, Reptile };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Maml: return "maml";
    case Variant::Anil: return "anil";
    case Variant::Reptile: return "reptile";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "maml") return Variant::Maml;
  if (s == "anil") return Variant::Anil;
  if (s == "reptile") return Variant::Reptile;
  throw ConfigError("variant must be maml, anil or reptile, got '" + s + "'");
}

struct MetaConfig {
  Variant variant = Variant::Maml;
  double alpha = 0.01;    // inner and fine-tuning rate
  double beta = 0.008;    // outer rate (MAML, ANIL)
  double epsilon = 0.1;   // Reptile interpolation rate
  int inner_steps = 5;
  int k_tasks = 4;
  int finetune_steps = 15;
  int epochs = 100;
  std::size_t batch_size = 8;
  double support_fraction = 0.5;
  std::uint64_t seed = 0;
  Task task = Task::Graph;
  bool paper_literal_reptile = false;  // theta - eps * mean(theta' - theta): moves away from the adapted parameters
  bool finetune_heads_only = false;

  void validate() const {
    auto finite_nonneg = [](double x) { return std::isfinite(x) && x >= 0.0; };
    if (!finite_nonneg(alpha) || !finite_nonneg(beta) || !finite_nonneg(epsilon))
      throw ConfigError("meta: alpha, beta and epsilon must be finite and non-negative");
    if (inner_steps < 1) throw ConfigError("meta: inner_steps must be >= 1");
    if (k_tasks < 1) throw ConfigError("meta: k_tasks must be >= 1");
    if (finetune_steps < 0 || epochs < 0) throw ConfigError("meta: finetune_steps and epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("meta: batch_size must be >= 1");
    if (!(support_fraction > 0.0 && support_fraction < 1.0)) throw ConfigError("meta: support_fraction must lie in (0, 1)");
  }
};

struct MetaState {
  ModelParams theta;
  std::vector<double> history;  // mean query loss per epoch
};

namespace detail {

inline bool adapts(Variant v, std::size_t i) {
  return v != Variant::Anil || is_head_param(static_cast<ParamId>(i));
}

inline void check_finite(const ad::Var& loss, const char* where, int step) {
  if (!std::isfinite(loss.scalar())) throw DivergenceError(where, step);
}

}  // namespace detail

/// inner_steps gradient steps at rate alpha on the support loss, recorded on
/// the tape so the result stays differentiable in `p` (second order).
inline ParamVars unroll_inner(const ParamVars& p, const GraphBatch& support, const MetaConfig& cfg,
                              const DeviationConfig& dev, ad::Tape& t) {
  ParamVars cur = p;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < kNumParams; ++i)
    if (detail::adapts(cfg.variant, i)) idx.push_back(i);
  for (int s = 0; s < cfg.inner_steps; ++s) {
    const auto loss = batch_loss(cur, support, dev, cfg.task, t);
    detail::check_finite(loss, "inner_adapt", s);
    std::vector<ad::Var> wrt;
    for (auto i : idx) wrt.push_back(cur[i]);
    const auto g = ad::grad(loss, wrt, true);
    for (std::size_t k = 0; k < idx.size(); ++k) cur[idx[k]] = ad::sub(cur[idx[k]], ad::scale(g[k], cfg.alpha));
  }
  return cur;
}

/// Values-only gradient steps; `steps` steps on the loss over `graphs`.
inline ModelParams descend(ModelParams theta, const GraphBatch& graphs, int steps, double rate, bool heads_only,
                           const MetaConfig& cfg, const DeviationConfig& dev, const char* where) {
  for (int s = 0; s < steps; ++s) {
    ad::Tape t;
    const auto p = to_tape(theta, t);
    const auto loss = batch_loss(p, graphs, dev, cfg.task, t);
    detail::check_finite(loss, where, s);
    std::vector<ad::Var> wrt;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < kNumParams; ++i)
      if (!heads_only || is_head_param(static_cast<ParamId>(i))) {
        wrt.push_back(p[i]);
        idx.push_back(i);
      }
    const auto g = ad::grad_values(loss, wrt);
    for (std::size_t k = 0; k < idx.size(); ++k) theta[idx[k]] -= rate * g[k];
  }
  return theta;
}

/// Adapted parameters after inner_steps on the support graphs. ANIL leaves
/// the encoder untouched.
inline ModelParams inner_adapt(const ModelParams& theta, const GraphList& support, const MetaConfig& cfg,
                               const DeviationConfig& dev) {
  if (support.empty()) throw ContractError("inner_adapt: empty support set");
  return descend(theta, make_batch(support), cfg.inner_steps, cfg.alpha, cfg.variant == Variant::Anil, cfg, dev,
                 "inner_adapt");
}

/// Support and query graphs of one task, as used in one outer step.
struct TaskBatch {
  GraphList support;
  GraphList query;
};

/// Sum over tasks of the query loss at the adapted parameters, as a
/// function of `p` through the unrolled inner loop.
inline ad::Var maml_objective(const ParamVars& p, const std::vector<TaskBatch>& tasks, const MetaConfig& cfg,
                              const DeviationConfig& dev, ad::Tape& t) {
  if (tasks.empty()) throw ContractError("maml_objective: no tasks");
  ad::Var total;
  for (const auto& task : tasks) {
    if (task.support.empty() || task.query.empty()) throw ContractError("maml_objective: empty support or query");
    const auto adapted = unroll_inner(p, make_batch(task.support), cfg, dev, t);
    const auto q = batch_loss(adapted, make_batch(task.query), dev, cfg.task, t);
    total = total.valid() ? ad::add(total, q) : q;
  }
  return total;
}

struct OuterResult {
  ModelParams theta;
  double query_loss = 0.0;  // mean over tasks, at the adapted parameters
};

/// theta - beta * d/dtheta sum_i L_query(theta'_i(theta)), second order.
inline OuterResult maml_outer_step(const ModelParams& theta, const std::vector<TaskBatch>& tasks, const MetaConfig& cfg,
                                   const DeviationConfig& dev) {
  ad::Tape t;
  const auto p = to_tape(theta, t);
  const auto obj = maml_objective(p, tasks, cfg, dev, t);
  detail::check_finite(obj, "maml_outer_step", 0);
  const auto g = ad::grad_values(obj, std::span<const ad::Var>(p.v));
  OuterResult r{theta, obj.scalar() / static_cast<double>(tasks.size())};
  for (std::size_t i = 0; i < kNumParams; ++i) r.theta[i] -= cfg.beta * g[i];
  return r;
}

/// theta + eps * mean_i(theta'_i - theta); the literal variant subtracts.
inline ModelParams reptile_update(const ModelParams& theta, const std::vector<ModelParams>& adapted, double epsilon,
                                  bool paper_literal) {
  if (adapted.empty()) throw ContractError("reptile_update: no adapted parameters");
  ModelParams out = theta;
  const double k = static_cast<double>(adapted.size());
  for (std::size_t i = 0; i < kNumParams; ++i) {
    if (epsilon == 1.0 && !paper_literal) {
      // full step: the mean of the adapted parameters, without a round trip through differences
      Matrix m = adapted[0][i];
      for (std::size_t a = 1; a < adapted.size(); ++a) m += adapted[a][i];
      out[i] = m / k;
      continue;
    }
    Matrix delta = Matrix::Zero(theta[i].rows(), theta[i].cols());
    for (const auto& a : adapted) delta += a[i] - theta[i];
    out[i] = paper_literal ? (theta[i] - epsilon * (delta / k)).eval() : (theta[i] + epsilon * (delta / k)).eval();
  }
  return out;
}

inline OuterResult reptile_outer_step(const ModelParams& theta, const std::vector<TaskBatch>& tasks,
                                      const MetaConfig& cfg, const DeviationConfig& dev) {
  if (tasks.empty()) throw ContractError("reptile_outer_step: no tasks");
  std::vector<ModelParams> adapted;
  double q = 0.0;
  for (const auto& task : tasks) {
    adapted.push_back(inner_adapt(theta, task.support, cfg, dev));
    ad::Tape t;
    ParamVars p;
    for (std::size_t i = 0; i < kNumParams; ++i) p[i] = t.constant(adapted.back()[i]);
    q += batch_loss(p, task.query, dev, cfg.task, t).scalar();
  }
  return {reptile_update(theta, adapted, cfg.epsilon, cfg.paper_literal_reptile), q / static_cast<double>(tasks.size())};
}

inline OuterResult outer_step(const ModelParams& theta, const std::vector<TaskBatch>& tasks, const MetaConfig& cfg,
                              const DeviationConfig& dev) {
  return cfg.variant == Variant::Reptile ? reptile_outer_step(theta, tasks, cfg, dev) : maml_outer_step(theta, tasks, cfg, dev);
}

/// Each epoch draws one stratified episode per auxiliary dataset, then one
/// mini-batch from its support half and one from its query half, and
/// applies the variant's outer step.
inline MetaState meta_train(const std::vector<const GraphDataset*>& aux, const ModelParams& theta0, const MetaConfig& cfg,
                            const DeviationConfig& dev) {
  cfg.validate();
  if (aux.size() != static_cast<std::size_t>(cfg.k_tasks))
    throw ContractError("meta_train: " + std::to_string(aux.size()) + " auxiliary datasets for k_tasks=" +
                        std::to_string(cfg.k_tasks));
  MetaState st{theta0, {}};
  Rng rng(cfg.seed);
  for (int e = 0; e < cfg.epochs; ++e) {
    std::vector<TaskBatch> tasks;
    for (const auto* ds : aux) {
      const auto ep = make_episode(*ds, cfg.support_fraction, rng.next());
      tasks.push_back({sample_batch(ep.support, cfg.batch_size, rng), sample_batch(ep.query, cfg.batch_size, rng)});
    }
    auto r = outer_step(st.theta, tasks, cfg, dev);
    st.theta = std::move(r.theta);
    st.history.push_back(r.query_loss);
  }
  return st;
}

inline MetaState meta_train(const std::vector<const GraphDataset*>& aux, const ModelShape& shape, const MetaConfig& cfg,
                            const DeviationConfig& dev) {
  Rng rng(Rng::mix(cfg.seed) ^ 0x1a2b3c4dULL);
  return meta_train(aux, init_params(shape, rng), cfg, dev);
}

/// finetune_steps gradient steps at rate alpha on the loss over the whole
/// target support set; all parameters unless finetune_heads_only.
inline ModelParams finetune(const ModelParams& theta, const GraphList& target_support, const MetaConfig& cfg,
                            const DeviationConfig& dev) {
  if (target_support.empty()) throw ContractError("finetune: empty target support set");
  if (cfg.finetune_steps == 0) return theta;
  return descend(theta, make_batch(target_support), cfg.finetune_steps, cfg.alpha, cfg.finetune_heads_only, cfg, dev,
                 "finetune");
}

// ---------------------------------------------------------------------------
// Checkpoints: a versioned text header followed by the flat parameter vector.

inline constexpr const char* kCheckpointMagic = "magad-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline void write_checkpoint(std::ostream& os, const MetaState& st) {
  const auto flat = flatten(st.theta);
  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  os << "blocks " << flat.layout.size() << '\n';
  for (const auto& b : flat.layout) os << b.name << ' ' << b.rows << ' ' << b.cols << '\n';
  os << std::setprecision(17);
  os << "history " << st.history.size();
  for (double h : st.history) os << ' ' << h;
  os << "\nvalues " << flat.flat.size() << '\n';
  for (std::size_t i = 0; i < flat.flat.size(); ++i) os << flat.flat[i] << '\n';
  os << "end\n";
}

inline MetaState read_checkpoint(std::istream& is, const std::string& origin = "<stream>") {
  std::size_t line = 0;
  auto fail = [&](const std::string& what) -> void { throw IntegrityError(origin, line, what); };
  auto next = [&](const std::string& tag) {
    std::string text;
    if (!std::getline(is, text)) fail("unexpected end of input, expected '" + tag + "'");
    ++line;
    std::istringstream ss(text);
    std::string got;
    ss >> got;
    if (got != tag) fail("expected '" + tag + "', found '" + got + "'");
    return ss;
  };
  auto head = next(kCheckpointMagic);
  int version = 0;
  if (!(head >> version) || version != kCheckpointVersion) fail("unsupported checkpoint version");
  auto bl = next("blocks");
  std::size_t nblocks = 0;
  if (!(bl >> nblocks) || nblocks != kNumParams) fail("expected " + std::to_string(kNumParams) + " parameter blocks");
  GradVector g;
  for (std::size_t k = 0; k < nblocks; ++k) {
    auto b = next(std::string(kParamNames[k]));
    LayoutEntry e{std::string(kParamNames[k]), 0, 0};
    if (!(b >> e.rows >> e.cols) || e.rows < 1 || e.cols < 1) fail("bad shape for block " + e.name);
    g.layout.push_back(e);
  }
  MetaState st;
  auto hl = next("history");
  std::size_t nh = 0;
  if (!(hl >> nh)) fail("bad history length");
  st.history.resize(nh);
  for (auto& h : st.history)
    if (!(hl >> h)) fail("history shorter than declared");
  auto vl = next("values");
  std::size_t nv = 0;
  if (!(vl >> nv) || nv != GradVector::layout_size(g.layout)) fail("value count does not match the block shapes");
  g.flat.resize(nv);
  for (auto& v : g.flat) {
    std::string text;
    if (!std::getline(is, text)) fail("values end early");
    ++line;
    std::istringstream ss(text);
    if (!(ss >> v)) fail("bad parameter value");
  }
  next("end");
  st.theta = unflatten(g);
  return st;
}

inline void save_checkpoint(const std::string& path, const MetaState& st) {
  std::ofstream os(path);
  if (!os) throw IngestionError("cannot write " + path);
  write_checkpoint(os, st);
  if (!os) throw IngestionError("write failed: " + path);
}

inline MetaState load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IngestionError("cannot read " + path);
  return read_checkpoint(is, path);
}

}  // namespace magad
