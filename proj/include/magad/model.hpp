#pragma once

#include <array>
#include <cmath>
#include <string_view>

#include "magad/grad_vector.hpp"
#include "magad/rng.hpp"

namespace magad {

enum class ParamId : std::size_t { W1, W2, Wv1, bv1, Wv2, bv2, WG1, bG1, WG2, bG2 };
inline constexpr std::size_t kNumParams = 10;
inline constexpr std::array<std::string_view, kNumParams> kParamNames = {"W1",  "W2",  "Wv1", "bv1", "Wv2",
                                                                         "bv2", "WG1", "bG1", "WG2", "bG2"};

constexpr bool is_encoder_param(ParamId id) { return id == ParamId::W1 || id == ParamId::W2; }
constexpr bool is_head_param(ParamId id) { return !is_encoder_param(id); }

/// Encoder weights plus node- and graph-score heads, indexed by ParamId.
template <typename T>
struct ParamSet {
  std::array<T, kNumParams> v;

  T& operator[](ParamId id) { return v[static_cast<std::size_t>(id)]; }
  const T& operator[](ParamId id) const { return v[static_cast<std::size_t>(id)]; }
  T& operator[](std::size_t i) { return v[i]; }
  const T& operator[](std::size_t i) const { return v[i]; }
};

using ModelParams = ParamSet<Matrix>;
using ParamVars = ParamSet<ad::Var>;

struct ModelShape {
  Eigen::Index input_dim = 0;
  Eigen::Index hidden = 256;       // h1
  Eigen::Index embedding = 64;     // h2 = D
  Eigen::Index head_hidden = 512;
};

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
inline Matrix glorot(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix m(fan_in, fan_out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-a, a);
  return m;
}

inline ModelParams init_params(const ModelShape& s, Rng& rng) {
  if (s.input_dim < 1 || s.hidden < 1 || s.embedding < 1 || s.head_hidden < 1)
    throw ArgumentError("init_params: every dimension must be positive");
  ModelParams p;
  p[ParamId::W1] = glorot(s.input_dim, s.hidden, rng);
  p[ParamId::W2] = glorot(s.hidden, s.embedding, rng);
  p[ParamId::Wv1] = glorot(s.embedding, s.head_hidden, rng);
  p[ParamId::bv1] = Matrix::Zero(1, s.head_hidden);
  p[ParamId::Wv2] = glorot(s.head_hidden, 1, rng);
  p[ParamId::bv2] = Matrix::Zero(1, 1);
  p[ParamId::WG1] = glorot(s.embedding, s.head_hidden, rng);
  p[ParamId::bG1] = Matrix::Zero(1, s.head_hidden);
  p[ParamId::WG2] = glorot(s.head_hidden, 1, rng);
  p[ParamId::bG2] = Matrix::Zero(1, 1);
  return p;
}

inline ModelShape shape_of(const ModelParams& p) {
  return {p[ParamId::W1].rows(), p[ParamId::W1].cols(), p[ParamId::W2].cols(), p[ParamId::Wv1].cols()};
}

/// Register every parameter as a trainable leaf.
inline ParamVars to_tape(const ModelParams& p, ad::Tape& t) {
  ParamVars v;
  for (std::size_t i = 0; i < kNumParams; ++i) v[i] = t.param(p[i], std::string(kParamNames[i]));
  return v;
}

inline ModelParams values_of(const ParamVars& v) {
  ModelParams p;
  for (std::size_t i = 0; i < kNumParams; ++i) p[i] = v[i].value();
  return p;
}

inline GradVector flatten(const ModelParams& p) {
  std::vector<Matrix> blocks(p.v.begin(), p.v.end());
  std::vector<std::string> names(kParamNames.begin(), kParamNames.end());
  return GradVector::flatten(blocks, names);
}

inline ModelParams unflatten(const GradVector& g) {
  if (g.layout.size() != kNumParams) throw DimensionError("unflatten: expected 10 parameter blocks");
  for (std::size_t i = 0; i < kNumParams; ++i)
    if (g.layout[i].name != kParamNames[i]) throw ContractError("unflatten: block " + std::to_string(i) + " is " + g.layout[i].name);
  auto blocks = g.unflatten();
  ModelParams p;
  for (std::size_t i = 0; i < kNumParams; ++i) p[i] = std::move(blocks[i]);
  return p;
}

inline bool same_shapes(const ModelParams& a, const ModelParams& b) {
  for (std::size_t i = 0; i < kNumParams; ++i)
    if (a[i].rows() != b[i].rows() || a[i].cols() != b[i].cols()) return false;
  return true;
}

}  // namespace magad
