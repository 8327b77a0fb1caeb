#pragma once

#include <numeric>
#include <string>
#include <vector>

#include "magad/autodiff.hpp"

namespace magad {

struct LayoutEntry {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  Eigen::Index size() const { return rows * cols; }
  bool operator==(const LayoutEntry&) const = default;
};

/// A flat vector of parameter-shaped blocks plus the layout to unflatten it.
struct GradVector {
  std::vector<double> flat;
  std::vector<LayoutEntry> layout;

  static std::size_t layout_size(const std::vector<LayoutEntry>& layout) {
    return std::accumulate(layout.begin(), layout.end(), std::size_t{0},
                           [](std::size_t acc, const LayoutEntry& e) { return acc + static_cast<std::size_t>(e.size()); });
  }

  static GradVector flatten(const std::vector<Matrix>& blocks, const std::vector<std::string>& names) {
    if (blocks.size() != names.size()) throw ContractError("flatten: block/name count mismatch");
    GradVector g;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      g.layout.push_back({names[i], blocks[i].rows(), blocks[i].cols()});
      g.flat.insert(g.flat.end(), blocks[i].data(), blocks[i].data() + blocks[i].size());
    }
    return g;
  }

  std::vector<Matrix> unflatten() const {
    if (flat.size() != layout_size(layout))
      throw DimensionError("unflatten: flat length " + std::to_string(flat.size()) + " does not match layout size " +
                           std::to_string(layout_size(layout)));
    std::vector<Matrix> out;
    std::size_t off = 0;
    for (const auto& e : layout) {
      out.push_back(Eigen::Map<const Matrix>(flat.data() + off, e.rows, e.cols));
      off += static_cast<std::size_t>(e.size());
    }
    return out;
  }

  std::size_t size() const { return flat.size(); }
};

namespace ad {

/// Reverse-mode gradient of scalar `output` w.r.t. every param leaf of its tape.
inline GradVector backward(const Var& output) {
  Tape& t = *output.tape;
  std::vector<Var> wrt;
  for (int id : t.params()) wrt.push_back(Var{&t, id});
  return GradVector::flatten(grad_values(output, wrt), t.param_names());
}

/// Central-difference estimate of the same quantity as backward().
/// Leaves the tape values as they were on entry.
inline GradVector finite_difference(const Var& output, double step) {
  if (!(step > 0.0)) throw ArgumentError("finite_difference: step must be positive");
  Tape& t = *output.tape;
  std::vector<Matrix> blocks;
  for (int id : t.params()) {
    const Var leaf{&t, id};
    Matrix base = leaf.value();
    Matrix g(base.rows(), base.cols());
    for (Eigen::Index k = 0; k < base.size(); ++k) {
      Matrix p = base;
      p.data()[k] += step;
      t.set_value(leaf, p);
      t.forward();
      const double fp = output.scalar();
      p.data()[k] = base.data()[k] - step;
      t.set_value(leaf, p);
      t.forward();
      const double fm = output.scalar();
      g.data()[k] = (fp - fm) / (2.0 * step);
    }
    t.set_value(leaf, base);
    blocks.push_back(std::move(g));
  }
  t.forward();
  return GradVector::flatten(blocks, t.param_names());
}

}  // namespace ad
}  // namespace magad
