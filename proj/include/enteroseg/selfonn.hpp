#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "enteroseg/gradcheck.hpp"
#include "enteroseg/nn_ops.hpp"
#include "enteroseg/rng.hpp"
#include "enteroseg/tensor.hpp"

namespace enteroseg {

// Convolution whose per-kernel-element operator is a learned polynomial of
// order Q in the (optionally tanh-squashed) input:
//
//   out = bias + sum_{q=1..Q} conv2d(s(x)^q, W_q)
//
// The constant terms of every kernel element collapse into one bias per
// output channel. With Q = 1 and no squash this is an ordinary conv2d.
template <typename T>
class SelfOnnConv2d {
 public:
  SelfOnnConv2d(int q_order, std::size_t out_channels, std::size_t in_channels, std::size_t kernel,
                std::size_t stride = 1, std::size_t padding = 0, bool pre_squash = true)
      : q_order_(q_order), kernel_(kernel), stride_(stride), padding_(padding),
        pre_squash_(pre_squash) {
    if (q_order < 1) throw Error("SelfOnnConv2d: q_order must be >= 1, got " + std::to_string(q_order));
    if (out_channels == 0 || in_channels == 0 || kernel == 0) {
      throw ShapeError("SelfOnnConv2d: dimensions must be positive");
    }
    for (int q = 0; q < q_order; ++q) {
      banks_.push_back(Tensor<T>::parameter({out_channels, in_channels, kernel, kernel},
                                            std::vector<T>(out_channels * in_channels * kernel * kernel)));
    }
    bias_ = Tensor<T>::parameter({out_channels}, std::vector<T>(out_channels, T(0)));
  }

  // Glorot-style uniform draw over the fan of all Q banks; bias zero.
  static SelfOnnConv2d init(int q_order, std::size_t out_channels, std::size_t in_channels,
                            std::size_t kernel, std::uint64_t seed, std::size_t stride = 1,
                            std::size_t padding = 0, bool pre_squash = true) {
    SelfOnnConv2d layer(q_order, out_channels, in_channels, kernel, stride, padding, pre_squash);
    Rng rng(seed);
    const double bound = init_bound(q_order, out_channels, in_channels, kernel);
    for (auto& bank : layer.banks_) {
      for (auto& w : bank.mutable_values()) w = static_cast<T>(rng.uniform(-bound, bound));
    }
    return layer;
  }

  static double init_bound(int q_order, std::size_t out_channels, std::size_t in_channels,
                           std::size_t kernel) {
    const double k2 = static_cast<double>(kernel * kernel);
    return std::sqrt(6.0 / (static_cast<double>(in_channels) * k2 * q_order +
                            static_cast<double>(out_channels) * k2));
  }

  // One convolution per power, summed; the bias rides on the first term so
  // zeroed higher banks contribute exact zeros.
  Tensor<T> forward(const Tensor<T>& input) const {
    if (input.rank() != 4 || input.dim(1) != in_channels()) {
      throw ShapeError("SelfOnnConv2d: input " + shape_str(input.shape()) + " expects " +
                       std::to_string(in_channels()) + " channels");
    }
    const Tensor<T> base = pre_squash_ ? tanh(input) : input;
    Tensor<T> out = conv2d(base, banks_[0], bias_, stride_, padding_);
    Tensor<T> power = base;
    for (int q = 2; q <= q_order_; ++q) {
      power = mul(power, base);
      out = add(out, conv2d(power, banks_[q - 1], stride_, padding_));
    }
    return out;
  }

  int q_order() const { return q_order_; }
  std::size_t kernel() const { return kernel_; }
  std::size_t stride() const { return stride_; }
  std::size_t padding() const { return padding_; }
  bool pre_squash() const { return pre_squash_; }
  std::size_t in_channels() const { return banks_[0].dim(1); }
  std::size_t out_channels() const { return banks_[0].dim(0); }

  // banks()[q-1] holds the weights multiplying s(x)^q.
  std::vector<Tensor<T>>& banks() { return banks_; }
  const std::vector<Tensor<T>>& banks() const { return banks_; }
  Tensor<T>& bias() { return bias_; }
  const Tensor<T>& bias() const { return bias_; }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> p = banks_;
    p.push_back(bias_);
    return p;
  }

  // Checkpoint names: "<prefix>.wq1".."<prefix>.wqQ", "<prefix>.bias".
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters(const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (int q = 0; q < q_order_; ++q) out.emplace_back(prefix + ".wq" + std::to_string(q + 1), banks_[q]);
    out.emplace_back(prefix + ".bias", bias_);
    return out;
  }

 private:
  int q_order_;
  std::size_t kernel_, stride_, padding_;
  bool pre_squash_;
  std::vector<Tensor<T>> banks_;
  Tensor<T> bias_;
};

// Finite-difference check of a layer's gradients with respect to every
// bank, the bias and the input, under a fixed random projection of the
// output (a weighted sum-loss). Non-finite forwards are reported through
// GradCheckResult::finite rather than as a large error.
inline GradCheckResult selfonn_gradcheck(SelfOnnConv2d<double>& layer, Tensor<double> input,
                                         std::uint64_t seed = 7) {
  const Tensor<double> probe = layer.forward(input.detach());
  if (!all_finite(probe)) return {0.0, false};
  Rng rng(seed);
  std::vector<double> proj(probe.numel());
  for (auto& p : proj) p = rng.uniform(-1.0, 1.0);
  const Tensor<double> weights(probe.shape(), proj);
  std::vector<Tensor<double>> wrt = layer.parameters();
  wrt.push_back(input);
  return check_gradients([&] { return sum(mul(layer.forward(input), weights)); }, wrt);
}

}  // namespace enteroseg
