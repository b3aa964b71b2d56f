#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <utility>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "enteroseg/tensor.hpp"

namespace enteroseg {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t spatial_out() const { return ho * wo; }
};

// Output columns [lo, hi) whose input column ox*stride + k - pad is inside.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, std::size_t stride,
                                                       std::size_t k, std::size_t pad) {
  const long off = static_cast<long>(k) - static_cast<long>(pad);
  const long s = static_cast<long>(stride);
  long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  const long last = static_cast<long>(in) - 1 - off;  // need ox*s <= last
  long hi = last < 0 ? 0 : last / s + 1;
  hi = std::min<long>(hi, static_cast<long>(out));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Unfolds one image [cin,h,w] into columns [cin*kh*kw, ho*wo].
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      const auto [ylo, yhi] = valid_range(g.ho, g.h, g.stride, ki, g.pad);
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.spatial_out();
        const auto [xlo, xhi] = valid_range(g.wo, g.w, g.stride, kj, g.pad);
        std::fill(row, row + ylo * g.wo, T(0));
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          T* out = row + oy * g.wo;
          const T* src = img + (c * g.h + oy * g.stride + ki - g.pad) * g.w;
          std::fill(out, out + xlo, T(0));
          if (g.stride == 1) {
            std::copy(src + xlo + kj - g.pad, src + xhi + kj - g.pad, out + xlo);
          } else {
            for (std::size_t ox = xlo; ox < xhi; ++ox) out[ox] = src[ox * g.stride + kj - g.pad];
          }
          std::fill(out + xhi, out + g.wo, T(0));
        }
        std::fill(row + yhi * g.wo, row + g.ho * g.wo, T(0));
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* img) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      const auto [ylo, yhi] = valid_range(g.ho, g.h, g.stride, ki, g.pad);
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.spatial_out();
        const auto [xlo, xhi] = valid_range(g.wo, g.w, g.stride, kj, g.pad);
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          const T* in = row + oy * g.wo;
          T* dst = img + (c * g.h + oy * g.stride + ki - g.pad) * g.w;
          for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox * g.stride + kj - g.pad] += in[ox];
        }
      }
    }
  }
}

}  // namespace detail

// 2D cross-correlation (no kernel flip) with optional per-channel bias.
// input [N,Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
  if (input.rank() != 4 || weight.rank() != 4) {
    throw ShapeError("conv2d: expected rank-4 input and weight, got " + shape_str(input.shape()) +
                     " and " + shape_str(weight.shape()));
  }
  if (input.dim(1) != weight.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(input.dim(1)) +
                     " channels but weight expects " + std::to_string(weight.dim(1)) + " (input " +
                     shape_str(input.shape()) + ", weight " + shape_str(weight.shape()) + ")");
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  detail::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0),
                         weight.dim(2), weight.dim(3), stride, padding, 0, 0};
  if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding) {
    throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                     shape_str(input.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match Cout " +
                     std::to_string(g.cout));
  }
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t in_img = g.cin * g.h * g.w;
  const std::size_t out_img = g.cout * g.spatial_out();
  std::vector<T> out(g.n * out_img);
  std::vector<T> cols(g.patch() * g.spatial_out());
  detail::CMapMat<T> wmat(weight.values().data(), g.cout, g.patch());
  for (std::size_t n = 0; n < g.n; ++n) {
    detail::im2col(input.values().data() + n * in_img, g, cols.data());
    detail::CMapMat<T> cmat(cols.data(), g.patch(), g.spatial_out());
    detail::MapMat<T> omat(out.data() + n * out_img, g.cout, g.spatial_out());
    omat.noalias() = wmat * cmat;
    if (bias.defined()) {
      for (std::size_t c = 0; c < g.cout; ++c) omat.row(c).array() += bias[c];
    }
  }

  auto in_n = input.node(), w_n = weight.node();
  auto b_n = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(
      Shape{g.n, g.cout, g.ho, g.wo}, std::move(out), {&input, &weight, &bias},
      [in_n, w_n, b_n, g, in_img, out_img](const detail::Node<T>& o) {
        T* gi = detail::grad_sink(in_n);
        T* gw = detail::grad_sink(w_n);
        T* gb = b_n ? detail::grad_sink(b_n) : nullptr;
        std::vector<T> cols(g.patch() * g.spatial_out());
        std::vector<T> dcols(gi ? cols.size() : 0);
        detail::CMapMat<T> wmat(w_n->value.data(), g.cout, g.patch());
        for (std::size_t n = 0; n < g.n; ++n) {
          detail::CMapMat<T> gout(o.grad.data() + n * out_img, g.cout, g.spatial_out());
          if (gb) {
            for (std::size_t c = 0; c < g.cout; ++c) gb[c] += gout.row(c).sum();
          }
          if (gw) {
            detail::im2col(in_n->value.data() + n * in_img, g, cols.data());
            detail::CMapMat<T> cmat(cols.data(), g.patch(), g.spatial_out());
            detail::MapMat<T> gwmat(gw, g.cout, g.patch());
            gwmat.noalias() += gout * cmat.transpose();
          }
          if (gi) {
            detail::MapMat<T> dc(dcols.data(), g.patch(), g.spatial_out());
            dc.noalias() = wmat.transpose() * gout;
            detail::col2im(dcols.data(), g, gi + n * in_img);
          }
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride = 1,
                 std::size_t padding = 0) {
  return conv2d(input, weight, Tensor<T>(), stride, padding);
}

enum class PoolKind { max, avg };

// Windowed reduction over [N,C,H,W]. Max-pool padding acts as -inf; the
// max backward routes to the first maximal element in scan order.
template <typename T>
Tensor<T> pool2d(const Tensor<T>& input, PoolKind kind, std::size_t k, std::size_t stride,
                 std::size_t padding = 0) {
  if (input.rank() != 4) throw ShapeError("pool2d: expected rank-4 input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (k < 1 || stride < 1 || k > h + 2 * padding || k > w + 2 * padding) {
    throw ShapeError("pool2d: window " + std::to_string(k) + " invalid for input " +
                     shape_str(input.shape()));
  }
  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (w + 2 * padding - k) / stride + 1;
  std::vector<T> out(n * c * ho * wo);
  std::vector<std::size_t> argmax(kind == PoolKind::max ? out.size() : 0);
  const T* x = input.values().data();
  const T inv_area = T(1) / static_cast<T>(k * k);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x + plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const std::size_t oi = (plane * ho + oy) * wo + ox;
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_i = 0;
        T acc = T(0);
        for (std::size_t ky = 0; ky < k; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            const std::size_t ii = iy * w + ix;
            if (src[ii] > best) {
              best = src[ii];
              best_i = plane * h * w + ii;
            }
            acc += src[ii];
          }
        }
        if (kind == PoolKind::max) {
          out[oi] = best;
          argmax[oi] = best_i;
        } else {
          out[oi] = acc * inv_area;
        }
      }
    }
  }
  auto in_n = input.node();
  return detail::make_result<T>(
      Shape{n, c, ho, wo}, std::move(out), {&input},
      [in_n, kind, argmax = std::move(argmax), k, stride, padding, h, w, ho, wo,
       inv_area](const detail::Node<T>& o) {
        T* g = detail::grad_sink(in_n);
        if (!g) return;
        if (kind == PoolKind::max) {
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[argmax[i]] += o.grad[i];
          return;
        }
        const std::size_t planes = o.grad.size() / (ho * wo);
        for (std::size_t plane = 0; plane < planes; ++plane) {
          for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const T go = o.grad[(plane * ho + oy) * wo + ox] * inv_area;
              for (std::size_t ky = 0; ky < k; ++ky) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                  if (ix < 0 || ix >= static_cast<long>(w)) continue;
                  g[plane * h * w + iy * w + ix] += go;
                }
              }
            }
          }
        }
      });
}

namespace detail {

// Source sampling positions for align-corners-false bilinear resampling
// from `in` to `out` samples along one axis.
struct LinearTap {
  std::size_t i0, i1;
  double frac;
};

inline std::vector<LinearTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[d] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& input, std::size_t factor) {
  if (input.rank() != 4) throw ShapeError("upsample_bilinear: expected rank-4 input");
  if (factor < 2) throw ShapeError("upsample_bilinear: factor must be >= 2");
  const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  auto ty = detail::bilinear_taps(h, oh);
  auto tx = detail::bilinear_taps(w, ow);
  std::vector<T> out(planes * oh * ow);
  const T* x = input.values().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x + p * h * w;
    T* dst = out.data() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const auto& a = ty[oy];
      const T fy = static_cast<T>(a.frac);
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const auto& b = tx[ox];
        const T fx = static_cast<T>(b.frac);
        const T top = src[a.i0 * w + b.i0] * (T(1) - fx) + src[a.i0 * w + b.i1] * fx;
        const T bot = src[a.i1 * w + b.i0] * (T(1) - fx) + src[a.i1 * w + b.i1] * fx;
        dst[oy * ow + ox] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  auto in_n = input.node();
  return detail::make_result<T>(
      Shape{input.dim(0), input.dim(1), oh, ow}, std::move(out), {&input},
      [in_n, ty = std::move(ty), tx = std::move(tx), planes, h, w, oh, ow](const detail::Node<T>& o) {
        T* g = detail::grad_sink(in_n);
        if (!g) return;
        for (std::size_t p = 0; p < planes; ++p) {
          const T* go = o.grad.data() + p * oh * ow;
          T* gi = g + p * h * w;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const auto& a = ty[oy];
            const T fy = static_cast<T>(a.frac);
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const auto& b = tx[ox];
              const T fx = static_cast<T>(b.frac);
              const T v = go[oy * ow + ox];
              gi[a.i0 * w + b.i0] += v * (T(1) - fy) * (T(1) - fx);
              gi[a.i0 * w + b.i1] += v * (T(1) - fy) * fx;
              gi[a.i1 * w + b.i0] += v * fy * (T(1) - fx);
              gi[a.i1 * w + b.i1] += v * fy * fx;
            }
          }
        }
      });
}

// Per-pixel softmax over the channel axis of [N,C,H,W], max-subtracted.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& input) {
  if (input.rank() != 4 || input.dim(1) < 2) {
    throw ShapeError("softmax_channels: expected [N,C>=2,H,W], got " + shape_str(input.shape()));
  }
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  std::vector<T> out(input.numel());
  const T* x = input.values().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t base = b * c * hw + p;
      T mx = x[base];
      for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, x[base + k * hw]);
      T s = T(0);
      for (std::size_t k = 0; k < c; ++k) {
        const T e = std::exp(x[base + k * hw] - mx);
        out[base + k * hw] = e;
        s += e;
      }
      for (std::size_t k = 0; k < c; ++k) out[base + k * hw] /= s;
    }
  }
  auto in_n = input.node();
  return detail::make_result<T>(input.shape(), std::move(out), {&input},
                                [in_n, n, c, hw](const detail::Node<T>& o) {
                                  T* g = detail::grad_sink(in_n);
                                  if (!g) return;
                                  for (std::size_t b = 0; b < n; ++b) {
                                    for (std::size_t p = 0; p < hw; ++p) {
                                      const std::size_t base = b * c * hw + p;
                                      T dot = T(0);
                                      for (std::size_t k = 0; k < c; ++k) {
                                        dot += o.value[base + k * hw] * o.grad[base + k * hw];
                                      }
                                      for (std::size_t k = 0; k < c; ++k) {
                                        const std::size_t i = base + k * hw;
                                        g[i] += o.value[i] * (o.grad[i] - dot);
                                      }
                                    }
                                  }
                                });
}

enum class Mode { train, eval };

// Learnable affine parameters plus running statistics for one batch-norm
// layer. Running stats are buffers: they are checkpointed but not trained.
template <typename T>
struct BatchNormState {
  Tensor<T> scale;
  Tensor<T> shift;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  explicit BatchNormState(std::size_t channels = 0)
      : scale(Tensor<T>::parameter({channels}, std::vector<T>(channels, T(1)))),
        shift(Tensor<T>::parameter({channels}, std::vector<T>(channels, T(0)))),
        running_mean(channels, T(0)),
        running_var(channels, T(1)) {}

  std::size_t channels() const { return running_mean.size(); }
};

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, BatchNormState<T>& st, Mode mode) {
  if (input.rank() != 4 || input.dim(1) != st.channels()) {
    throw ShapeError("batch_norm: input " + shape_str(input.shape()) + " vs " +
                     std::to_string(st.channels()) + " channels");
  }
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  const std::size_t m = n * hw;
  if (mode == Mode::train && m < 2) {
    throw NumericError("batch_norm: train mode needs at least 2 values per channel, got " +
                       std::to_string(m));
  }
  const T* x = input.values().data();
  std::vector<T> mean(c), invstd(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (mode == Mode::train) {
      T s = T(0);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) s += x[(b * c + ch) * hw + p];
      const T mu = s / static_cast<T>(m);
      T ss = T(0);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) {
          const T d = x[(b * c + ch) * hw + p] - mu;
          ss += d * d;
        }
      const T var = ss / static_cast<T>(m);
      mean[ch] = mu;
      invstd[ch] = T(1) / std::sqrt(var + st.eps);
      const T unbiased = ss / static_cast<T>(m - 1);
      st.running_mean[ch] = (T(1) - st.momentum) * st.running_mean[ch] + st.momentum * mu;
      st.running_var[ch] = (T(1) - st.momentum) * st.running_var[ch] + st.momentum * unbiased;
    } else {
      mean[ch] = st.running_mean[ch];
      invstd[ch] = T(1) / std::sqrt(st.running_var[ch] + st.eps);
    }
  }
  std::vector<T> xhat(input.numel()), out(input.numel());
  const auto gamma = st.scale.values();
  const auto beta = st.shift.values();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t i = (b * c + ch) * hw + p;
        xhat[i] = (x[i] - mean[ch]) * invstd[ch];
        out[i] = gamma[ch] * xhat[i] + beta[ch];
      }
  auto in_n = input.node(), g_n = st.scale.node(), b_n = st.shift.node();
  return detail::make_result<T>(
      input.shape(), std::move(out), {&input, &st.scale, &st.shift},
      [in_n, g_n, b_n, xhat = std::move(xhat), invstd = std::move(invstd), mode, n, c, hw,
       m](const detail::Node<T>& o) {
        T* gx = detail::grad_sink(in_n);
        T* gg = detail::grad_sink(g_n);
        T* gb = detail::grad_sink(b_n);
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sum_g = T(0), sum_gx = T(0);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t p = 0; p < hw; ++p) {
              const std::size_t i = (b * c + ch) * hw + p;
              sum_g += o.grad[i];
              sum_gx += o.grad[i] * xhat[i];
            }
          if (gb) gb[ch] += sum_g;
          if (gg) gg[ch] += sum_gx;
          if (!gx) continue;
          const T gamma = g_n->value[ch];
          if (mode == Mode::train) {
            const T k = gamma * invstd[ch] / static_cast<T>(m);
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t i = (b * c + ch) * hw + p;
                gx[i] += k * (static_cast<T>(m) * o.grad[i] - sum_g - xhat[i] * sum_gx);
              }
          } else {
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t i = (b * c + ch) * hw + p;
                gx[i] += o.grad[i] * gamma * invstd[ch];
              }
          }
        }
      });
}

}  // namespace enteroseg
