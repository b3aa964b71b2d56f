#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "enteroseg/checkpoint.hpp"
#include "enteroseg/error.hpp"
#include "enteroseg/image.hpp"
#include "enteroseg/nn_ops.hpp"
#include "enteroseg/rng.hpp"
#include "enteroseg/selfonn.hpp"
#include "enteroseg/tensor.hpp"

namespace enteroseg {

// Named trainable tensors plus non-trained buffers (batch-norm running
// statistics). Tensors are shared handles; buffers point into the layers.
template <typename T>
struct Registry {
  std::vector<std::pair<std::string, Tensor<T>>> params;
  std::vector<std::pair<std::string, std::vector<T>*>> buffers;

  void add(const std::string& name, const Tensor<T>& t) { params.emplace_back(name, t); }
};

namespace nets_detail {

// Kaiming-uniform for ReLU networks: U(-b, b), b = sqrt(6 / fan_in).
template <typename T>
Tensor<T> kaiming_weight(std::size_t cout, std::size_t cin, std::size_t k, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(cin * k * k));
  std::vector<T> w(cout * cin * k * k);
  for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::parameter({cout, cin, k, k}, std::move(w));
}

}  // namespace nets_detail

template <typename T>
struct Conv {
  Tensor<T> weight, bias;  // bias undefined when the layer has none
  std::size_t stride = 1, padding = 0;

  Conv() = default;
  Conv(std::size_t cin, std::size_t cout, std::size_t k, bool with_bias, Rng& rng, std::size_t stride_ = 1)
      : weight(nets_detail::kaiming_weight<T>(cout, cin, k, rng)), stride(stride_), padding(k / 2) {
    if (with_bias) bias = Tensor<T>::parameter({cout}, std::vector<T>(cout, T(0)));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }
  std::size_t out_channels() const { return weight.dim(0); }

  void collect(const std::string& prefix, Registry<T>& r) {
    r.add(prefix + ".weight", weight);
    if (bias.defined()) r.add(prefix + ".bias", bias);
  }
};

template <typename T>
struct BatchNorm {
  BatchNormState<T> state;

  explicit BatchNorm(std::size_t c = 0) : state(c) {}
  Tensor<T> operator()(const Tensor<T>& x, Mode mode) { return batch_norm(x, state, mode); }

  void collect(const std::string& prefix, Registry<T>& r) {
    r.add(prefix + ".scale", state.scale);
    r.add(prefix + ".shift", state.shift);
    r.buffers.emplace_back(prefix + ".running_mean", &state.running_mean);
    r.buffers.emplace_back(prefix + ".running_var", &state.running_var);
  }
};

// BN -> ReLU -> 3x3 conv producing `growth` maps, appended to the input.
template <typename T>
struct DenseLayer {
  BatchNorm<T> bn;
  Conv<T> conv;

  DenseLayer(std::size_t cin, std::size_t growth, Rng& rng) : bn(cin), conv(cin, growth, 3, false, rng) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    return concat_channels<T>({x, conv(relu(bn(x, mode)))});
  }
  void collect(const std::string& prefix, Registry<T>& r) {
    bn.collect(prefix + ".bn", r);
    conv.collect(prefix + ".conv", r);
  }
};

// BN -> ReLU -> 1x1 conv -> 2x2 average pool.
template <typename T>
struct Transition {
  BatchNorm<T> bn;
  Conv<T> conv;

  Transition(std::size_t cin, std::size_t cout, Rng& rng) : bn(cin), conv(cin, cout, 1, false, rng) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    return pool2d(conv(relu(bn(x, mode))), PoolKind::avg, 2, 2);
  }
  void collect(const std::string& prefix, Registry<T>& r) {
    bn.collect(prefix + ".bn", r);
    conv.collect(prefix + ".conv", r);
  }
};

// conv (no bias) -> BN -> ReLU
template <typename T>
struct ConvBnRelu {
  Conv<T> conv;
  BatchNorm<T> bn;

  ConvBnRelu(std::size_t cin, std::size_t cout, std::size_t k, Rng& rng)
      : conv(cin, cout, k, false, rng), bn(cout) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) { return relu(bn(conv(x), mode)); }
  void collect(const std::string& prefix, Registry<T>& r) {
    conv.collect(prefix + ".conv", r);
    bn.collect(prefix + ".bn", r);
  }
};

struct EncoderConfig {
  std::size_t in_channels = 1;
  int levels = 4;
  std::size_t init_channels = 16;
  std::size_t layers_per_block = 2;
  std::size_t growth = 8;
  double compression = 0.5;
};

// Channels of X^{i,0} for i = 0..L (stem output, then each dense block).
inline std::vector<std::size_t> encoder_channels(const EncoderConfig& c) {
  std::vector<std::size_t> ch{c.init_channels};
  std::size_t in = c.init_channels;
  for (int i = 1; i <= c.levels; ++i) {
    const std::size_t out = in + c.layers_per_block * c.growth;
    ch.push_back(out);
    in = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(static_cast<double>(out) * c.compression)));
  }
  return ch;
}

inline void validate(const EncoderConfig& c) {
  if (c.levels < 1) throw Error("encoder: levels must be >= 1");
  if (c.in_channels == 0 || c.init_channels == 0 || c.growth == 0 || c.layers_per_block == 0) {
    throw Error("encoder: channel counts must be positive");
  }
  if (!(c.compression > 0.0 && c.compression <= 1.0)) throw Error("encoder: compression must be in (0, 1]");
}

// Stem: stride-1 7x7 conv, BN, ReLU (X^{0,0}, full resolution), then 3x3
// stride-2 max pool. Block i runs at 1/2^i resolution and yields X^{i,0};
// transitions sit between consecutive blocks.
template <typename T>
struct DenseEncoder {
  EncoderConfig cfg;
  Conv<T> stem;
  BatchNorm<T> stem_bn;
  std::vector<std::vector<DenseLayer<T>>> blocks;
  std::vector<Transition<T>> transitions;

  DenseEncoder(const EncoderConfig& c, Rng& rng) : cfg(c) {
    validate(c);
    stem = Conv<T>(c.in_channels, c.init_channels, 7, false, rng);
    stem_bn = BatchNorm<T>(c.init_channels);
    const auto ch = encoder_channels(c);
    std::size_t in = c.init_channels;
    for (int i = 1; i <= c.levels; ++i) {
      std::vector<DenseLayer<T>> block;
      for (std::size_t l = 0; l < c.layers_per_block; ++l) block.emplace_back(in + l * c.growth, c.growth, rng);
      blocks.push_back(std::move(block));
      if (i < c.levels) {
        const std::size_t t = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::floor(static_cast<double>(ch[i]) * c.compression)));
        transitions.emplace_back(ch[i], t, rng);
        in = t;
      }
    }
  }

  std::vector<Tensor<T>> forward(const Tensor<T>& x, Mode mode) {
    std::vector<Tensor<T>> feats;
    Tensor<T> h = relu(stem_bn(stem(x), mode));
    feats.push_back(h);
    h = pool2d(h, PoolKind::max, 3, 2, 1);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      for (auto& layer : blocks[i]) h = layer.forward(h, mode);
      feats.push_back(h);
      if (i < transitions.size()) h = transitions[i].forward(h, mode);
    }
    return feats;
  }

  void collect(const std::string& prefix, Registry<T>& r) {
    stem.collect(prefix + ".stem.conv", r);
    stem_bn.collect(prefix + ".stem.bn", r);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      for (std::size_t l = 0; l < blocks[i].size(); ++l) {
        blocks[i][l].collect(prefix + ".block" + std::to_string(i + 1) + ".layer" + std::to_string(l + 1), r);
      }
      if (i < transitions.size()) transitions[i].collect(prefix + ".trans" + std::to_string(i + 1), r);
    }
  }
};

// Shared plumbing: parameter lists and checkpoint state.
template <typename T, typename Derived>
class NetworkBase {
 public:
  Registry<T> registry() {
    Registry<T> r;
    static_cast<Derived*>(this)->collect(r);
    return r;
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : registry().params) out.push_back(t);
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() { return registry().params; }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& [name, t] : registry().params) n += t.numel();
    return n;
  }

  // Parameters followed by buffers, as float arrays.
  std::vector<NamedArray> state() {
    auto r = registry();
    std::vector<NamedArray> out;
    for (auto& [name, t] : r.params) out.push_back({name, t.shape(), {t.values().begin(), t.values().end()}});
    for (auto& [name, buf] : r.buffers) out.push_back({name, Shape{buf->size()}, {buf->begin(), buf->end()}});
    return out;
  }

  // Every registered name must be present with a matching shape; extra
  // arrays in the file are an error too.
  void load_state(const std::vector<NamedArray>& arrays) {
    auto r = registry();
    std::map<std::string, const NamedArray*> byname;
    for (const auto& a : arrays) byname[a.name] = &a;
    const std::size_t expected = r.params.size() + r.buffers.size();
    if (byname.size() != expected || arrays.size() != expected) {
      throw FormatError("checkpoint holds " + std::to_string(arrays.size()) + " arrays, network expects " +
                        std::to_string(expected));
    }
    auto find = [&](const std::string& name, const Shape& shape) -> const NamedArray& {
      auto it = byname.find(name);
      if (it == byname.end()) throw FormatError("checkpoint is missing " + name);
      if (it->second->shape != shape) {
        throw FormatError("checkpoint shape mismatch for " + name + ": " + shape_str(it->second->shape) + " vs " +
                          shape_str(shape));
      }
      return *it->second;
    };
    for (auto& [name, t] : r.params) {
      const auto& a = find(name, t.shape());
      std::copy(a.values.begin(), a.values.end(), t.mutable_values().begin());
    }
    for (auto& [name, buf] : r.buffers) {
      const auto& a = find(name, Shape{buf->size()});
      std::copy(a.values.begin(), a.values.end(), buf->begin());
    }
  }

 protected:
  static void check_input(const Tensor<T>& x, std::size_t in_channels, int levels) {
    if (x.rank() != 4 || x.dim(1) != in_channels) {
      throw ShapeError("network input " + shape_str(x.shape()) + " expects N x " + std::to_string(in_channels) +
                       " x H x W");
    }
    const std::size_t div = std::size_t{1} << levels;
    if (x.dim(2) % div != 0 || x.dim(3) % div != 0) {
      throw ShapeError("network input " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                       " is not divisible by 2^" + std::to_string(levels));
    }
  }
};

inline void check_divisible(std::size_t size, int levels, const char* what) {
  if (size == 0 || size % (std::size_t{1} << levels) != 0) {
    throw Error(std::string(what) + ": input size " + std::to_string(size) + " is not divisible by 2^" +
                std::to_string(levels));
  }
}

// ---------------------------------------------------------------------------
// Coarse multiclass network

struct CoarseNetConfig {
  std::size_t input_size = 224;
  EncoderConfig encoder;
  std::size_t decoder_channels = 8;  // node (i, j) has decoder_channels * 2^i maps
  std::size_t n_classes = kNumClasses;

  std::size_t decoder_width(int level) const { return decoder_channels << level; }
};

// Nested-skip decoder: node (i, j), j >= 1, i + j <= L, applies one
// conv-BN-ReLU to concat(X^{i,0}, ..., X^{i,j-1}, up(X^{i+1,j-1})). The head
// is a 1x1 conv on X^{0,L} followed by a channel softmax.
template <typename T>
class CoarseNet : public NetworkBase<T, CoarseNet<T>> {
 public:
  CoarseNet(const CoarseNetConfig& cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed), encoder_(cfg.encoder, rng_) {
    check_divisible(cfg.input_size, cfg.encoder.levels, "build_coarse_net");
    if (cfg.n_classes < 2 || cfg.decoder_channels == 0) throw Error("build_coarse_net: bad class/decoder width");
    const int L = cfg.encoder.levels;
    const auto ench = encoder_channels(cfg.encoder);
    for (int j = 1; j <= L; ++j) {
      for (int i = 0; i + j <= L; ++i) {
        std::size_t cin = ench[i] + static_cast<std::size_t>(j - 1) * cfg.decoder_width(i);
        cin += j == 1 ? ench[i + 1] : cfg.decoder_width(i + 1);
        nodes_.emplace(std::make_pair(i, j), ConvBnRelu<T>(cin, cfg.decoder_width(i), 3, rng_));
      }
    }
    head_ = Conv<T>(cfg.decoder_width(0), cfg.n_classes, 1, true, rng_);
  }

  const CoarseNetConfig& config() const { return cfg_; }

  // Class logits before the softmax.
  Tensor<T> logits(const Tensor<T>& x, Mode mode) {
    this->check_input(x, cfg_.encoder.in_channels, cfg_.encoder.levels);
    const int L = cfg_.encoder.levels;
    std::map<std::pair<int, int>, Tensor<T>> X;
    const auto feats = encoder_.forward(x, mode);
    for (int i = 0; i <= L; ++i) X[{i, 0}] = feats[i];
    for (int j = 1; j <= L; ++j) {
      for (int i = 0; i + j <= L; ++i) {
        std::vector<Tensor<T>> parts;
        for (int m = 0; m < j; ++m) parts.push_back(X[{i, m}]);
        parts.push_back(upsample_bilinear(X[{i + 1, j - 1}], 2));
        X[{i, j}] = nodes_.at({i, j}).forward(concat_channels(parts), mode);
      }
    }
    return head_(X[{0, L}]);
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) { return softmax_channels(logits(x, mode)); }

  void collect(Registry<T>& r) {
    encoder_.collect("enc", r);
    for (auto& [ij, node] : nodes_) {
      node.collect("dec.x" + std::to_string(ij.first) + "_" + std::to_string(ij.second), r);
    }
    head_.collect("head", r);
  }

 private:
  CoarseNetConfig cfg_;
  Rng rng_;
  DenseEncoder<T> encoder_;
  std::map<std::pair<int, int>, ConvBnRelu<T>> nodes_;
  Conv<T> head_;
};

// ---------------------------------------------------------------------------
// Organ-wise binary network

enum class DecoderKind { selfonn, conv };

struct BinaryNetConfig {
  std::size_t input_size = 96;
  EncoderConfig encoder{1, 3, 16, 2, 8, 0.5};
  std::size_t decoder_channels = 8;
  int q_order = 3;
  bool pre_squash = true;
  DecoderKind decoder = DecoderKind::selfonn;
  // Applied after every decoder layer except the last; none by default
  // because the next SelfONN layer squashes its input anyway.
  std::optional<Activation> decoder_activation;

  std::size_t decoder_width(int level) const { return decoder_channels << level; }
};

// One decoder layer: either a SelfONN operator or a plain conv with the
// same 3x3 geometry. Conv weights are named like SelfONN bank 1 so the two
// variants can exchange state.
template <typename T>
struct DecoderLayer {
  std::optional<SelfOnnConv2d<T>> onn;
  Conv<T> conv;

  DecoderLayer(const BinaryNetConfig& cfg, std::size_t cin, std::size_t cout, Rng& rng) {
    if (cfg.decoder == DecoderKind::selfonn) {
      onn = SelfOnnConv2d<T>::init(cfg.q_order, cout, cin, 3, rng.next_u64(), 1, 1, cfg.pre_squash);
    } else {
      conv = Conv<T>(cin, cout, 3, true, rng);
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const { return onn ? onn->forward(x) : conv(x); }

  void collect(const std::string& prefix, Registry<T>& r) {
    if (onn) {
      for (auto& [name, t] : onn->named_parameters(prefix)) r.add(name, t);
    } else {
      r.add(prefix + ".wq1", conv.weight);
      r.add(prefix + ".bias", conv.bias);
    }
  }
};

// Decoder level i (from L-1 down to 0): upsample the deeper output,
// concatenate the X^{i,0} skip, apply one decoder layer. A final extra
// layer maps to one channel and a sigmoid gives the probability map.
template <typename T>
class BinaryNet : public NetworkBase<T, BinaryNet<T>> {
 public:
  BinaryNet(const BinaryNetConfig& cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed), encoder_(cfg.encoder, rng_) {
    check_divisible(cfg.input_size, cfg.encoder.levels, "build_binary_net");
    if (cfg.q_order < 1) throw Error("build_binary_net: q_order must be >= 1");
    if (cfg.decoder_channels == 0) throw Error("build_binary_net: decoder width must be positive");
    const int L = cfg.encoder.levels;
    const auto ench = encoder_channels(cfg.encoder);
    std::size_t deeper = ench[L];
    for (int i = L - 1; i >= 0; --i) {
      levels_.emplace_back(cfg, deeper + ench[i], cfg.decoder_width(i), rng_);
      deeper = cfg.decoder_width(i);
    }
    final_.emplace_back(cfg, deeper, 1, rng_);
  }

  const BinaryNetConfig& config() const { return cfg_; }

  // Pre-sigmoid map, N x 1 x H x W.
  Tensor<T> logits(const Tensor<T>& x, Mode mode) {
    this->check_input(x, cfg_.encoder.in_channels, cfg_.encoder.levels);
    const auto feats = encoder_.forward(x, mode);
    const int L = cfg_.encoder.levels;
    Tensor<T> h = feats[L];
    for (int k = 0; k < L; ++k) {
      const int i = L - 1 - k;
      h = levels_[k].forward(concat_channels<T>({upsample_bilinear(h, 2), feats[i]}));
      if (cfg_.decoder_activation) h = activation(h, *cfg_.decoder_activation);
    }
    return final_[0].forward(h);
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) { return sigmoid(logits(x, mode)); }

  void collect(Registry<T>& r) {
    encoder_.collect("enc", r);
    for (std::size_t k = 0; k < levels_.size(); ++k) {
      levels_[k].collect("dec.level" + std::to_string(cfg_.encoder.levels - 1 - static_cast<int>(k)), r);
    }
    final_[0].collect("final", r);
  }

  // Decoder layer for level i, for gradient checks and weight surgery.
  DecoderLayer<T>& decoder_level(int i) { return levels_.at(static_cast<std::size_t>(cfg_.encoder.levels - 1 - i)); }

 private:
  BinaryNetConfig cfg_;
  Rng rng_;
  DenseEncoder<T> encoder_;
  std::vector<DecoderLayer<T>> levels_;
  std::vector<DecoderLayer<T>> final_;
};

// ---------------------------------------------------------------------------
// Config files

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"in_channels", c.in_channels},           {"levels", c.levels}, {"init_channels", c.init_channels},
       {"layers_per_block", c.layers_per_block}, {"growth", c.growth}, {"compression", c.compression}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.in_channels = j.value("in_channels", c.in_channels);
  c.levels = j.value("levels", c.levels);
  c.init_channels = j.value("init_channels", c.init_channels);
  c.layers_per_block = j.value("layers_per_block", c.layers_per_block);
  c.growth = j.value("growth", c.growth);
  c.compression = j.value("compression", c.compression);
}

inline void to_json(nlohmann::json& j, const CoarseNetConfig& c) {
  j = {{"input_size", c.input_size},
       {"encoder", c.encoder},
       {"decoder_channels", c.decoder_channels},
       {"n_classes", c.n_classes}};
}

inline void from_json(const nlohmann::json& j, CoarseNetConfig& c) {
  c.input_size = j.value("input_size", c.input_size);
  if (j.contains("encoder")) j.at("encoder").get_to(c.encoder);
  c.decoder_channels = j.value("decoder_channels", c.decoder_channels);
  c.n_classes = j.value("n_classes", c.n_classes);
}

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

inline void to_json(nlohmann::json& j, const BinaryNetConfig& c) {
  j = {{"input_size", c.input_size},
       {"encoder", c.encoder},
       {"decoder_channels", c.decoder_channels},
       {"q_order", c.q_order},
       {"pre_squash", c.pre_squash},
       {"decoder", c.decoder == DecoderKind::selfonn ? "selfonn" : "conv"},
       {"decoder_activation", c.decoder_activation ? activation_name(*c.decoder_activation) : "none"}};
}

inline void from_json(const nlohmann::json& j, BinaryNetConfig& c) {
  c.input_size = j.value("input_size", c.input_size);
  if (j.contains("encoder")) j.at("encoder").get_to(c.encoder);
  c.decoder_channels = j.value("decoder_channels", c.decoder_channels);
  c.q_order = j.value("q_order", c.q_order);
  c.pre_squash = j.value("pre_squash", c.pre_squash);
  const std::string dec = j.value("decoder", std::string("selfonn"));
  if (dec != "selfonn" && dec != "conv") throw Error("binary net: decoder must be selfonn or conv, got " + dec);
  c.decoder = dec == "selfonn" ? DecoderKind::selfonn : DecoderKind::conv;
  const std::string act = j.value("decoder_activation", std::string("none"));
  if (act == "none") {
    c.decoder_activation.reset();
  } else if (act == "relu") {
    c.decoder_activation = Activation::relu;
  } else if (act == "tanh") {
    c.decoder_activation = Activation::tanh;
  } else if (act == "sigmoid") {
    c.decoder_activation = Activation::sigmoid;
  } else {
    throw Error("binary net: unknown decoder_activation " + act);
  }
}

}  // namespace enteroseg
