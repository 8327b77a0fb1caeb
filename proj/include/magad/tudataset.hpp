#pragma once

// TUDataset text format:
//   <name>_A.txt                one edge per line, "i, j", 1-indexed global node ids
//   <name>_graph_indicator.txt  graph id (1-indexed) of node i on line i
//   <name>_graph_labels.txt     one integer label per graph
//   <name>_node_labels.txt      optional, one integer label per node
//   <name>_node_anomaly_mask.txt optional (written for synthetic data), 0/1 per node

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "magad/graph.hpp"

namespace magad {

namespace detail {

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw IngestionError("cannot open " + p.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  while (!lines.empty() && lines.back().find_first_not_of(" \t") == std::string::npos) lines.pop_back();
  return lines;
}

inline long parse_int(const std::string& s, const std::string& file, std::size_t line_no) {
  std::size_t pos = 0;
  long v = 0;
  try {
    v = std::stol(s, &pos);
  } catch (const std::exception&) {
    throw IntegrityError(file, line_no, "expected an integer, got '" + s + "'");
  }
  if (s.find_first_not_of(" \t", pos) != std::string::npos)
    throw IntegrityError(file, line_no, "trailing characters in '" + s + "'");
  return v;
}

inline std::vector<long> read_int_column(const std::filesystem::path& p) {
  const auto lines = read_lines(p);
  std::vector<long> out;
  out.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) out.push_back(parse_int(lines[i], p.filename().string(), i + 1));
  return out;
}

inline std::filesystem::path require(const std::filesystem::path& dir, const std::string& file) {
  auto p = dir / file;
  if (!std::filesystem::exists(p)) throw IngestionError("missing mandatory file " + p.string());
  return p;
}

}  // namespace detail

/// Load `<directory>/<name>_*.txt`. Graph labels are remapped so the least
/// frequent class is anomalous (1); ties pick the larger raw label.
inline GraphDataset parse_tudataset(const std::filesystem::path& directory, const std::string& name) {
  namespace fs = std::filesystem;
  const auto a_path = detail::require(directory, name + "_A.txt");
  const auto ind_path = detail::require(directory, name + "_graph_indicator.txt");
  const auto gl_path = detail::require(directory, name + "_graph_labels.txt");
  const auto nl_path = directory / (name + "_node_labels.txt");
  const auto mask_path = directory / (name + "_node_anomaly_mask.txt");

  const auto indicator = detail::read_int_column(ind_path);
  const auto raw_labels = detail::read_int_column(gl_path);
  const std::size_t n_nodes = indicator.size();
  const std::size_t n_graphs = raw_labels.size();
  if (n_graphs == 0) throw IngestionError(gl_path.string() + " lists no graphs");

  // graph -> global node ids (0-indexed), in file order
  std::vector<std::vector<std::size_t>> members(n_graphs);
  std::vector<std::size_t> local(n_nodes);
  for (std::size_t i = 0; i < n_nodes; ++i) {
    const long g = indicator[i];
    if (g < 1 || static_cast<std::size_t>(g) > n_graphs)
      throw IntegrityError(ind_path.filename().string(), i + 1,
                           "graph id " + std::to_string(g) + " outside 1.." + std::to_string(n_graphs));
    local[i] = members[static_cast<std::size_t>(g - 1)].size();
    members[static_cast<std::size_t>(g - 1)].push_back(i);
  }

  GraphDataset ds;
  ds.name = name;
  ds.graphs.resize(n_graphs);
  for (std::size_t g = 0; g < n_graphs; ++g) {
    const auto n = static_cast<Eigen::Index>(members[g].size());
    if (n == 0) throw IntegrityError(ind_path.filename().string(), 0, "graph " + std::to_string(g + 1) + " has no nodes");
    ds.graphs[g].adjacency = Matrix::Zero(n, n);
    ds.graphs[g].id = g;
  }

  const auto edge_lines = detail::read_lines(a_path);
  const std::string a_file = a_path.filename().string();
  for (std::size_t k = 0; k < edge_lines.size(); ++k) {
    const auto& line = edge_lines[k];
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw IntegrityError(a_file, k + 1, "expected 'i, j', got '" + line + "'");
    const long i = detail::parse_int(line.substr(0, comma), a_file, k + 1);
    const long j = detail::parse_int(line.substr(comma + 1), a_file, k + 1);
    for (long v : {i, j})
      if (v < 1 || static_cast<std::size_t>(v) > n_nodes)
        throw IntegrityError(a_file, k + 1, "node id " + std::to_string(v) + " outside 1.." + std::to_string(n_nodes));
    const auto gi = static_cast<std::size_t>(indicator[static_cast<std::size_t>(i - 1)] - 1);
    const auto gj = static_cast<std::size_t>(indicator[static_cast<std::size_t>(j - 1)] - 1);
    if (gi != gj) throw IntegrityError(a_file, k + 1, "edge joins nodes of different graphs");
    if (i == j) continue;
    const auto li = static_cast<Eigen::Index>(local[static_cast<std::size_t>(i - 1)]);
    const auto lj = static_cast<Eigen::Index>(local[static_cast<std::size_t>(j - 1)]);
    ds.graphs[gi].adjacency(li, lj) = 1.0;
    ds.graphs[gi].adjacency(lj, li) = 1.0;
  }

  auto per_node = [&](const fs::path& p) -> std::optional<std::vector<long>> {
    if (!fs::exists(p)) return std::nullopt;
    auto col = detail::read_int_column(p);
    if (col.size() != n_nodes)
      throw IntegrityError(p.filename().string(), std::min(col.size(), n_nodes) + 1,
                           "expected " + std::to_string(n_nodes) + " node lines, found " + std::to_string(col.size()));
    return col;
  };

  if (auto labels = per_node(nl_path)) {
    for (std::size_t i = 0; i < n_nodes; ++i) {
      auto& g = ds.graphs[static_cast<std::size_t>(indicator[i] - 1)];
      g.node_labels.push_back(static_cast<int>((*labels)[i]));
    }
    assign_one_hot_features(ds);
  } else {
    for (auto& g : ds.graphs) g.features = degree_features(g.adjacency);
    ds.feature_dim = 2;
  }
  if (auto mask = per_node(mask_path)) {
    for (std::size_t i = 0; i < n_nodes; ++i) {
      if ((*mask)[i] != 0 && (*mask)[i] != 1)
        throw IntegrityError(mask_path.filename().string(), i + 1, "mask entries must be 0 or 1");
      ds.graphs[static_cast<std::size_t>(indicator[i] - 1)].node_anomaly_mask.push_back(static_cast<int>((*mask)[i]));
    }
  }

  std::map<long, std::size_t> counts;
  for (long l : raw_labels) ++counts[l];
  long anomalous = counts.begin()->first;
  for (const auto& [label, c] : counts)
    if (c <= counts[anomalous]) anomalous = label;  // ascending order: ties resolve to the larger label
  for (std::size_t g = 0; g < n_graphs; ++g) {
    ds.graphs[g].graph_label = raw_labels[g] == anomalous && counts.size() > 1 ? 1 : 0;
    ds.graphs[g].true_label = ds.graphs[g].graph_label;
  }
  return ds;
}

/// Write `ds` in TUDataset format. Labels are written as remapped 0/1.
inline void write_tudataset(const GraphDataset& ds, const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  auto open = [&](const std::string& suffix) {
    std::ofstream out(directory / (ds.name + suffix));
    if (!out) throw IngestionError("cannot write " + (directory / (ds.name + suffix)).string());
    return out;
  };
  auto a = open("_A.txt");
  auto ind = open("_graph_indicator.txt");
  auto gl = open("_graph_labels.txt");
  const bool labels = !ds.graphs.empty() && ds.graphs.front().has_node_labels();
  const bool masks = !ds.graphs.empty() && ds.graphs.front().has_node_mask();
  std::ofstream nl;
  std::ofstream mk;
  if (labels) nl = open("_node_labels.txt");
  if (masks) mk = open("_node_anomaly_mask.txt");

  std::size_t base = 1;
  for (std::size_t g = 0; g < ds.graphs.size(); ++g) {
    const auto& gr = ds.graphs[g];
    const auto n = static_cast<Eigen::Index>(gr.num_nodes());
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        if (gr.adjacency(i, j) != 0.0) a << base + static_cast<std::size_t>(i) << ", " << base + static_cast<std::size_t>(j) << '\n';
    for (Eigen::Index i = 0; i < n; ++i) {
      ind << g + 1 << '\n';
      if (labels) nl << gr.node_labels[static_cast<std::size_t>(i)] << '\n';
      if (masks) mk << gr.node_anomaly_mask[static_cast<std::size_t>(i)] << '\n';
    }
    gl << gr.graph_label << '\n';
    base += static_cast<std::size_t>(n);
  }
}

}  // namespace magad
