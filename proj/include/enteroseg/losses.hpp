#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "enteroseg/error.hpp"
#include "enteroseg/tensor.hpp"

namespace enteroseg {

inline constexpr double kLogFloor = 1e-12;

// Mean over pixels of -w[t] log(p_t + 1e-12). `probs` is N x C x H x W with
// channel-normalized columns; `targets` holds N*H*W class indices in
// (n, y, x) order. The mean is over pixels, not over weights, so a uniform
// weight w scales the loss by exactly w.
template <typename T>
Tensor<T> weighted_cross_entropy(const Tensor<T>& probs, std::span<const std::uint8_t> targets,
                                 std::span<const double> weights) {
  if (probs.rank() != 4) throw ShapeError("weighted_cross_entropy: probs must be N x C x H x W");
  const std::size_t n = probs.dim(0), c = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  if (targets.size() != n * hw) {
    throw ShapeError("weighted_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n * hw) + " pixels");
  }
  if (weights.size() != c) throw ShapeError("weighted_cross_entropy: weight count != channel count");
  const T* p = probs.values().data();
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < hw; ++i) {
      const std::uint8_t t = targets[b * hw + i];
      if (t >= c) {
        throw Error("weighted_cross_entropy: target label " + std::to_string(t) + " >= " + std::to_string(c) +
                    " classes");
      }
      total -= weights[t] * std::log(static_cast<double>(p[(b * c + t) * hw + i]) + kLogFloor);
    }
  }
  const double npix = static_cast<double>(n * hw);
  std::vector<std::uint8_t> tgt(targets.begin(), targets.end());
  std::vector<double> w(weights.begin(), weights.end());
  const auto pn = probs.node();
  return detail::make_result<T>(Shape{1}, {static_cast<T>(total / npix)}, {&probs},
                                [pn, tgt = std::move(tgt), w = std::move(w), n, c, hw, npix](const auto& out) {
                                  T* gp = detail::grad_sink(pn);
                                  if (!gp) return;
                                  const double g = out.grad[0];
                                  const T* pv = pn->value.data();
                                  for (std::size_t b = 0; b < n; ++b)
                                    for (std::size_t i = 0; i < hw; ++i) {
                                      const std::size_t k = (b * c + tgt[b * hw + i]) * hw + i;
                                      gp[k] -= static_cast<T>(g * w[tgt[b * hw + i]] /
                                                              (npix * (static_cast<double>(pv[k]) + kLogFloor)));
                                    }
                                });
}

namespace detail {

template <typename T>
void require_overlap_shapes(const Tensor<T>& pred, std::span<const T> target, const char* op) {
  if (pred.numel() != target.size()) {
    throw ShapeError(std::string(op) + ": prediction has " + std::to_string(pred.numel()) + " values, target " +
                     std::to_string(target.size()));
  }
}

}  // namespace detail

// 1 - (2 sum(p y) + eps) / (sum p + sum y + eps)
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, std::span<const T> target, double eps = 1e-6) {
  detail::require_overlap_shapes(pred, target, "dice_loss");
  const T* p = pred.values().data();
  double inter = 0.0, total = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    inter += static_cast<double>(p[i]) * target[i];
    total += static_cast<double>(p[i]) + target[i];
  }
  const double num = 2.0 * inter + eps, den = total + eps;
  std::vector<T> y(target.begin(), target.end());
  const auto pn = pred.node();
  return detail::make_result<T>(Shape{1}, {static_cast<T>(1.0 - num / den)}, {&pred},
                                [pn, y = std::move(y), num, den](const auto& out) {
                                  T* gp = detail::grad_sink(pn);
                                  if (!gp) return;
                                  const double g = out.grad[0];
                                  for (std::size_t i = 0; i < y.size(); ++i) {
                                    gp[i] -= static_cast<T>(g * (2.0 * y[i] * den - num) / (den * den));
                                  }
                                });
}

// 1 - (sum(p y) + eps) / (sum(p + y - p y) + eps)
template <typename T>
Tensor<T> jaccard_loss(const Tensor<T>& pred, std::span<const T> target, double eps = 1e-6) {
  detail::require_overlap_shapes(pred, target, "jaccard_loss");
  const T* p = pred.values().data();
  double inter = 0.0, uni = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double pi = p[i], yi = target[i];
    inter += pi * yi;
    uni += pi + yi - pi * yi;
  }
  const double num = inter + eps, den = uni + eps;
  std::vector<T> y(target.begin(), target.end());
  const auto pn = pred.node();
  return detail::make_result<T>(Shape{1}, {static_cast<T>(1.0 - num / den)}, {&pred},
                                [pn, y = std::move(y), num, den](const auto& out) {
                                  T* gp = detail::grad_sink(pn);
                                  if (!gp) return;
                                  const double g = out.grad[0];
                                  for (std::size_t i = 0; i < y.size(); ++i) {
                                    const double yi = y[i];
                                    gp[i] -= static_cast<T>(g * (yi * den - num * (1.0 - yi)) / (den * den));
                                  }
                                });
}

template <typename T>
Tensor<T> composite_loss(const Tensor<T>& pred, std::span<const T> target, double eps = 1e-6) {
  return scale(add(dice_loss(pred, target, eps), jaccard_loss(pred, target, eps)), T(0.5));
}

}  // namespace enteroseg
