#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "invcoss/tensor.hpp"

namespace invcoss {

// Bias-corrected Adam over a fixed set of named parameter tensors.
// Reads each parameter's accumulated gradient; caller zeroes grads between
// steps (zero_grad below).
template <typename T>
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor<T>>> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& [name, p] : params_) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  uint64_t step_count() const { return t_; }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
      auto& [name, p] = params_[k];
      const std::vector<T>& g = p.grad();
      T* pv = p.data();
      for (size_t i = 0; i < g.size(); ++i) {
        if (!std::isfinite(static_cast<double>(g[i]))) {
          throw NumericError("adam: non-finite gradient in parameter '" + name + "'");
        }
        double gd = static_cast<double>(g[i]);
        double m = beta1_ * m_[k][i] + (1.0 - beta1_) * gd;
        double v = beta2_ * v_[k][i] + (1.0 - beta2_) * gd * gd;
        m_[k][i] = static_cast<T>(m);
        v_[k][i] = static_cast<T>(v);
        double mhat = m / bc1;
        double vhat = v / bc2;
        pv[i] = static_cast<T>(pv[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& params() const { return params_; }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<std::vector<T>> m_, v_;
  uint64_t t_ = 0;
  double lr_, beta1_, beta2_, eps_;
};

// Warmup then cosine decay to zero; step and total are 0-based step counts.
inline double lr_schedule(double base, size_t step, size_t total, double warmup_frac) {
  if (total == 0) return base;
  size_t warm = static_cast<size_t>(warmup_frac * static_cast<double>(total));
  if (warm > 0 && step < warm) {
    return base * static_cast<double>(step + 1) / static_cast<double>(warm);
  }
  double span = static_cast<double>(total - warm);
  double prog = span > 0 ? static_cast<double>(step - warm) / span : 1.0;
  return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * prog));
}

}  // namespace invcoss
