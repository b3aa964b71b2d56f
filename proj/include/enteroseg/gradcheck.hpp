#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "enteroseg/tensor.hpp"

namespace enteroseg {

// Relative error with a floor on the denominator so that near-zero
// gradients are compared in absolute terms instead of amplifying noise.
inline double relative_error(double analytic, double numeric, double floor = 1e-2) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  bool finite = true;  // false when the forward produced NaN/Inf
};

// Compares analytic gradients of `loss_fn` against central finite
// differences for every element of every tensor in `wrt`. `loss_fn` must
// rebuild its graph from the current tensor values on each call.
inline GradCheckResult check_gradients(const std::function<Tensor<double>()>& loss_fn,
                                       std::vector<Tensor<double>> wrt, double h = 1e-4) {
  GradCheckResult res;
  for (auto& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  const Tensor<double> loss = loss_fn();
  if (!std::isfinite(loss.item())) {
    res.finite = false;
    return res;
  }
  backward(loss);
  for (auto& t : wrt) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(t.numel(), 0.0);
    auto vals = t.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double up = loss_fn().item();
      vals[i] = orig - h;
      const double down = loss_fn().item();
      vals[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        res.finite = false;
        return res;
      }
      const double numeric = (up - down) / (2.0 * h);
      res.max_rel_error = std::max(res.max_rel_error, relative_error(analytic[i], numeric));
    }
  }
  return res;
}

}  // namespace enteroseg
