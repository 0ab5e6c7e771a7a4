#pragma once

#include <cmath>
#include <vector>

#include "metadd/core/tensor.hpp"

namespace metadd::nn {

/// SGD with momentum and decoupled-from-nothing weight decay (decay added to
/// the gradient, classic formulation).
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, double momentum, double weight_decay)
      : params_(std::move(params)),
        momentum_(momentum),
        weight_decay_(weight_decay) {
    velocity_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i)
      velocity_[i].assign(std::size_t(params_[i].numel()), 0.0);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      if (!p.has_grad()) continue;
      const double* g = p.grad().data();
      double* v = velocity_[i].data();
      double* w = p.data();
      for (i64 j = 0; j < p.numel(); ++j) {
        double gj = g[j] + weight_decay_ * w[j];
        v[j] = momentum_ * v[j] + gj;
        w[j] -= lr * v[j];
      }
    }
  }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
  double weight_decay_;
};

/// Linear warm-up to `base_lr` followed by cosine decay to zero.
struct WarmupCosine {
  double base_lr = 0.05;
  i64 warmup_steps = 0;
  i64 total_steps = 1;

  double lr_at(i64 step) const {
    if (warmup_steps > 0 && step < warmup_steps)
      return base_lr * double(step + 1) / double(warmup_steps);
    i64 decay_total = std::max<i64>(1, total_steps - warmup_steps);
    i64 t = std::min(decay_total, step - warmup_steps);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * double(t) /
                                           double(decay_total)));
  }
};

}  // namespace metadd::nn
