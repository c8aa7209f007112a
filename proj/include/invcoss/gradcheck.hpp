#pragma once

#include <functional>
#include <vector>

#include "invcoss/tensor.hpp"

namespace invcoss {

// Central-difference check of reverse-mode gradients. `fn` must map the
// given tensors to a scalar and be deterministic (draw any randomness
// outside and capture it). Returns the max over coordinates of
// |analytic - fd| / max(|analytic|, |fd|, 1e-12).
template <typename T>
double grad_check(const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& fn,
                  const std::vector<Tensor<T>>& point, double eps) {
  std::vector<Tensor<T>> leaves;
  leaves.reserve(point.size());
  for (const auto& p : point) {
    leaves.push_back(Tensor<T>::from(p.shape(), p.values(), true));
  }
  Tensor<T> out = fn(leaves);
  if (out.numel() != 1) {
    throw ShapeError("grad_check: fn output must be scalar, got " + shape_str(out.shape()));
  }
  backward(out);
  std::vector<std::vector<T>> analytic;
  analytic.reserve(leaves.size());
  for (auto& l : leaves) analytic.push_back(l.grad());

  double worst = 0.0;
  NoGradGuard guard;
  for (size_t t = 0; t < point.size(); ++t) {
    std::vector<Tensor<T>> probe;
    probe.reserve(point.size());
    for (const auto& p : point) probe.push_back(Tensor<T>::from(p.shape(), p.values(), false));
    for (size_t i = 0; i < point[t].numel(); ++i) {
      T orig = point[t].data()[i];
      probe[t].data()[i] = orig + static_cast<T>(eps);
      double fp = static_cast<double>(fn(probe).item());
      probe[t].data()[i] = orig - static_cast<T>(eps);
      double fm = static_cast<double>(fn(probe).item());
      probe[t].data()[i] = orig;
      double fd = (fp - fm) / (2.0 * eps);
      double an = static_cast<double>(analytic[t][i]);
      double denom = std::max({std::abs(an), std::abs(fd), 1e-12});
      worst = std::max(worst, std::abs(an - fd) / denom);
    }
  }
  return worst;
}

}  // namespace invcoss
