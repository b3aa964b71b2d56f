#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "enteroseg/error.hpp"

namespace enteroseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

// One vertex of the differentiation graph. A node owns its value and
// gradient; non-leaf nodes also own the closure that pushes their gradient
// into their parents. The graph is rebuilt by every forward pass.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Dense row-major tensor. Copies are shallow: two Tensor handles may refer
// to the same node, which is what lets parameters be shared between a
// network and its optimizer.
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor requires a floating-point scalar");

 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<detail::Node<T>>()) {
    node_->value.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<detail::Node<T>>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  // Leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  const std::vector<T>& vec() const { return node_->value; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return node_->is_leaf; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  // Value copy with no graph attached.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

// Builds the output node of an op. When no input requires a gradient the
// closure is dropped and the result is a detached constant.
template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> inputs, Backward&& backward) {
  Tensor<T> out(std::move(shape), std::move(value));
  auto& node = *out.node();
  for (const Tensor<T>* in : inputs) {
    if (in && in->defined() && in->requires_grad()) {
      node.requires_grad = true;
      break;
    }
  }
  if (node.requires_grad) {
    node.is_leaf = false;
    for (const Tensor<T>* in : inputs) {
      if (in && in->defined()) node.parents.push_back(in->node());
    }
    node.backward_fn = std::forward<Backward>(backward);
  }
  return out;
}

template <typename T>
Tensor<T> make_result_list(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                           std::function<void(const Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(value));
  auto& node = *out.node();
  for (const auto& in : inputs) {
    if (in.requires_grad()) node.requires_grad = true;
  }
  if (node.requires_grad) {
    node.is_leaf = false;
    for (const auto& in : inputs) node.parents.push_back(in.node());
    node.backward_fn = std::move(backward);
  }
  return out;
}

// Gradient sink for a parent: null when the parent does not need one.
template <typename T>
T* grad_sink(const std::shared_ptr<Node<T>>& n) {
  return n->requires_grad ? n->ensure_grad().data() : nullptr;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace detail

// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls;
// interior gradients are recomputed from zero each call.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || !loss.requires_grad()) {
    throw Error("backward: tensor is not connected to a differentiation graph");
  }
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  // Iterative post-order DFS: every node lands after all of its parents.
  std::vector<std::pair<NodeT*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      NodeT* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (NodeT* n : order) {
    if (!n->is_leaf) n->grad.assign(n->value.size(), T(0));
  }
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (!n->is_leaf && n->backward_fn) n->backward_fn(*n);
  }
}

template <typename T>
void zero_grads(std::span<Tensor<T>> params) {
  for (auto& p : params) p.zero_grad();
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(v), {&a, &b}, [an, bn](const auto& out) {
    for (auto* sink : {detail::grad_sink(an), detail::grad_sink(bn)}) {
      if (!sink) continue;
      for (std::size_t i = 0; i < out.grad.size(); ++i) sink[i] += out.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(v), {&a, &b}, [an, bn](const auto& out) {
    if (T* ga = detail::grad_sink(an))
      for (std::size_t i = 0; i < out.grad.size(); ++i) ga[i] += out.grad[i];
    if (T* gb = detail::grad_sink(bn))
      for (std::size_t i = 0; i < out.grad.size(); ++i) gb[i] -= out.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(v), {&a, &b}, [an, bn](const auto& out) {
    if (T* ga = detail::grad_sink(an))
      for (std::size_t i = 0; i < out.grad.size(); ++i) ga[i] += out.grad[i] * bn->value[i];
    if (T* gb = detail::grad_sink(bn))
      for (std::size_t i = 0; i < out.grad.size(); ++i) gb[i] += out.grad[i] * an->value[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * factor;
  auto an = a.node();
  return detail::make_result<T>(a.shape(), std::move(v), {&a}, [an, factor](const auto& out) {
    if (T* g = detail::grad_sink(an))
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T x : a.values()) s += x;
  auto an = a.node();
  return detail::make_result<T>(Shape{1}, {s}, {&a}, [an](const auto& out) {
    if (T* g = detail::grad_sink(an))
      for (std::size_t i = 0; i < an->value.size(); ++i) g[i] += out.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// Integer power; the q = 1 case still records an identity node so the
// graph shape does not depend on q.
template <typename T>
Tensor<T> pow(const Tensor<T>& a, int q) {
  if (q < 1) throw Error("pow: exponent must be >= 1, got " + std::to_string(q));
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    T r = a[i];
    for (int j = 1; j < q; ++j) r *= a[i];
    v[i] = r;
  }
  auto an = a.node();
  return detail::make_result<T>(a.shape(), std::move(v), {&a}, [an, q](const auto& out) {
    T* g = detail::grad_sink(an);
    if (!g) return;
    for (std::size_t i = 0; i < out.grad.size(); ++i) {
      const T y = an->value[i];
      T d = T(q);
      for (int j = 1; j < q; ++j) d *= y;
      g[i] += out.grad[i] * d;
    }
  });
}

enum class Activation { relu, sigmoid, tanh };

template <typename T>
Tensor<T> activation(const Tensor<T>& a, Activation kind) {
  std::vector<T> v(a.numel());
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] > T(0) ? a[i] : T(0);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < v.size(); ++i) {
        // Split on sign so exp never overflows.
        const T x = a[i];
        if (x >= T(0)) {
          v[i] = T(1) / (T(1) + std::exp(-x));
        } else {
          const T e = std::exp(x);
          v[i] = e / (T(1) + e);
        }
      }
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(a[i]);
      break;
  }
  auto an = a.node();
  return detail::make_result<T>(a.shape(), std::move(v), {&a}, [an, kind](const auto& out) {
    T* g = detail::grad_sink(an);
    if (!g) return;
    const auto& y = out.value;
    for (std::size_t i = 0; i < out.grad.size(); ++i) {
      switch (kind) {
        case Activation::relu: g[i] += an->value[i] > T(0) ? out.grad[i] : T(0); break;
        case Activation::sigmoid: g[i] += out.grad[i] * y[i] * (T(1) - y[i]); break;
        case Activation::tanh: g[i] += out.grad[i] * (T(1) - y[i] * y[i]); break;
      }
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) { return activation(a, Activation::relu); }
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) { return activation(a, Activation::sigmoid); }
template <typename T>
Tensor<T> tanh(const Tensor<T>& a) { return activation(a, Activation::tanh); }

// Concatenation along axis 1 of tensors that agree on every other axis.
// Used for feature maps [N,C,H,W] and for stacking weight banks [Cout,Cin,k,k].
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& s0 = parts[0].shape();
  if (s0.size() < 2) throw ShapeError("concat_channels: rank must be >= 2");
  const std::size_t outer = s0[0];
  std::size_t inner = 1;
  for (std::size_t d = 2; d < s0.size(); ++d) inner *= s0[d];
  std::size_t total_c = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size() && s[0] == s0[0];
    for (std::size_t d = 2; ok && d < s.size(); ++d) ok = s[d] == s0[d];
    if (!ok) {
      throw ShapeError("concat_channels: " + shape_str(s) + " incompatible with " + shape_str(s0));
    }
    total_c += s[1];
  }
  Shape out_shape = s0;
  out_shape[1] = total_c;
  std::vector<T> v(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t block = p.dim(1) * inner;
    for (std::size_t n = 0; n < outer; ++n) {
      std::copy_n(p.values().begin() + n * block, block, v.begin() + (n * total_c + off) * inner);
    }
    off += p.dim(1);
  }
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result_list<T>(
      std::move(out_shape), std::move(v), parts,
      [nodes, offsets, outer, inner, total_c](const detail::Node<T>& out) {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          T* g = detail::grad_sink(nodes[k]);
          if (!g) continue;
          const std::size_t c = nodes[k]->shape[1];
          const std::size_t block = c * inner;
          for (std::size_t n = 0; n < outer; ++n) {
            const T* src = out.grad.data() + (n * total_c + offsets[k]) * inner;
            for (std::size_t i = 0; i < block; ++i) g[n * block + i] += src[i];
          }
        }
      });
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](T x) { return std::isfinite(x); });
}

// Cast a value tensor between scalar types (no graph).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> v(t.values().begin(), t.values().end());
  return Tensor<To>(t.shape(), std::move(v));
}

}  // namespace enteroseg
