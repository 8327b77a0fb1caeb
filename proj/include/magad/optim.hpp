#pragma once

#include <cmath>
#include <vector>

#include "magad/autodiff.hpp"

namespace magad {

/// Adam over a fixed list of matrices; one moment pair per slot.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(lr > 0.0)) throw ArgumentError("Adam: learning rate must be positive");
  }

  void step(std::vector<Matrix*> params, const std::vector<Matrix>& grads) {
    if (params.size() != grads.size()) throw ContractError("Adam: parameter and gradient counts differ");
    if (m_.empty()) {
      for (auto* p : params) {
        m_.push_back(Matrix::Zero(p->rows(), p->cols()));
        v_.push_back(Matrix::Zero(p->rows(), p->cols()));
      }
    }
    if (m_.size() != params.size()) throw ContractError("Adam: parameter count changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (grads[k].rows() != params[k]->rows() || grads[k].cols() != params[k]->cols())
        throw DimensionError("Adam: gradient " + shape_str(grads[k]) + " for parameter " + shape_str(*params[k]));
      m_[k] = beta1_ * m_[k] + (1.0 - beta1_) * grads[k];
      v_[k] = beta2_ * v_[k] + (1.0 - beta2_) * grads[k].cwiseProduct(grads[k]);
      params[k]->array() -= lr_ * (m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + eps_);
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<Matrix> m_, v_;
};

}  // namespace magad
