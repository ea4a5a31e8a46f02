#pragma once

#include <cmath>
#include <numbers>
#include <span>

#include "loopq/tensor.hpp"

namespace loopq {

/// Adam without weight decay. One instance per parameter tensor.
struct AdamSlot {
  Tensor m, v;
  std::size_t steps = 0;

  void update(Tensor& param, const Tensor& grad, double lr, double beta1 = 0.9, double beta2 = 0.999,
              double eps = 1e-8) {
    if (m.empty()) {
      m = Tensor(param.shape());
      v = Tensor(param.shape());
    }
    ++steps;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
    for (std::size_t i = 0; i < param.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      param[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

/// Rescales the gradients in place so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_grad_norm(std::span<Tensor> grads, double max_norm) {
  double ss = 0.0;
  for (const Tensor& g : grads) ss += squared_norm(g);
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const double k = max_norm / norm;
    for (Tensor& g : grads)
      for (double& v : g.data()) v *= k;
  }
  return norm;
}

/// Cosine decay from base to 0 over `total` steps.
inline double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total <= 1) return base;
  const double progress = static_cast<double>(step) / static_cast<double>(total);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace loopq
