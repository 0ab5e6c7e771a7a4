#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "metadd/core/ops.hpp"
#include "metadd/core/rng.hpp"

namespace metadd::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0, bool requires_grad = true) {
  Tensor t = Tensor::leaf(shape, requires_grad);
  for (i64 i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

/// Central finite differences of a scalar-valued function w.r.t. the entries
/// of x (x is perturbed in place and restored).
inline std::vector<double> numeric_grad(const std::function<double()>& f,
                                        Tensor x, double h = 1e-6) {
  std::vector<double> g(std::size_t(x.numel()));
  for (i64 i = 0; i < x.numel(); ++i) {
    double orig = x.data()[i];
    x.data()[i] = orig + h;
    double fp = f();
    x.data()[i] = orig - h;
    double fm = f();
    x.data()[i] = orig;
    g[std::size_t(i)] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Max |analytic - numeric| over coordinates, scaled by max(1, |numeric|).
inline double max_rel_grad_err(const Tensor& analytic,
                               const std::vector<double>& numeric) {
  double worst = 0.0;
  for (i64 i = 0; i < analytic.numel(); ++i) {
    double a = analytic.data()[i];
    double n = numeric[std::size_t(i)];
    double err = std::abs(a - n) / std::max(1.0, std::abs(n));
    worst = std::max(worst, err);
  }
  return worst;
}

/// FD-check d(loss_fn)/dx where loss_fn rebuilds the loss from the current
/// contents of x each call.
inline double fd_check(const std::function<Tensor()>& loss_fn, Tensor x,
                       double h = 1e-6) {
  Tensor loss = loss_fn();
  Tensor g = grad_of(loss, {x})[0];
  auto num = numeric_grad([&] { return loss_fn().item(); }, x, h);
  return max_rel_grad_err(g, num);
}

}  // namespace metadd::testing
