#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <future>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "enteroseg/checkpoint.hpp"
#include "enteroseg/dataset.hpp"
#include "enteroseg/error.hpp"
#include "enteroseg/image.hpp"
#include "enteroseg/losses.hpp"
#include "enteroseg/nn_ops.hpp"
#include "enteroseg/rng.hpp"
#include "enteroseg/tensor.hpp"

namespace enteroseg {

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m, v;

  AdamState() = default;
  explicit AdamState(const std::vector<Tensor<T>>& params) {
    for (const auto& p : params) {
      m.emplace_back(p.numel(), T(0));
      v.emplace_back(p.numel(), T(0));
    }
  }
};

// Bias-corrected Adam. Parameters without a gradient buffer are treated as
// having a zero gradient.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& st, double lr) {
  if (st.m.size() != params.size()) throw ShapeError("adam_step: state holds a different parameter count");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    if (st.m[k].size() != p.numel()) throw ShapeError("adam_step: moment buffer shape mismatch");
    const bool has = p.has_grad();
    auto vals = p.mutable_values();
    const auto g = p.grad();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double gi = has ? static_cast<double>(g[i]) : 0.0;
      const double mi = st.beta1 * st.m[k][i] + (1.0 - st.beta1) * gi;
      const double vi = st.beta2 * st.v[k][i] + (1.0 - st.beta2) * gi * gi;
      st.m[k][i] = static_cast<T>(mi);
      st.v[k][i] = static_cast<T>(vi);
      vals[i] = static_cast<T>(vals[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + st.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Plateau schedule and early stopping
//
// An epoch "improves" when its value is below the best so far by more than
// `threshold`. The first observation always improves. Both rules fire when
// the count of consecutive non-improving epochs reaches their patience.

struct PlateauScheduler {
  double lr = 1e-4, factor = 0.5;
  int patience = 5;
  double threshold = 1e-6;
  double best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;

  PlateauScheduler() = default;
  PlateauScheduler(double lr_, double factor_, int patience_, double threshold_ = 1e-6)
      : lr(lr_), factor(factor_), patience(patience_), threshold(threshold_) {
    if (!(factor > 0.0 && factor < 1.0)) throw Error("scheduler factor must be in (0, 1)");
    if (patience < 1) throw Error("scheduler patience must be >= 1");
    if (!(lr > 0.0)) throw Error("learning rate must be positive");
  }

  double step(double val_loss) {
    if (!std::isfinite(val_loss)) throw NumericError("scheduler: non-finite validation loss");
    if (val_loss < best - threshold) {
      best = val_loss;
      bad_epochs = 0;
    } else if (++bad_epochs >= patience) {
      lr *= factor;
      bad_epochs = 0;
    }
    return lr;
  }
};

struct EarlyStopping {
  int patience = 20;
  double threshold = 1e-6;
  double best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;

  EarlyStopping() = default;
  explicit EarlyStopping(int patience_, double threshold_ = 1e-6) : patience(patience_), threshold(threshold_) {
    if (patience < 1) throw Error("early-stop patience must be >= 1");
  }

  // True when training should stop after this epoch.
  bool step(double val_loss) {
    if (val_loss < best - threshold) {
      best = val_loss;
      bad_epochs = 0;
      return false;
    }
    return ++bad_epochs >= patience;
  }
};

// ---------------------------------------------------------------------------
// Configuration and log

enum class LossKind { weighted_ce, composite };

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch_size = 16;
  int max_epochs = 100;
  int early_stop_patience = 20;
  double scheduler_factor = 0.5;
  int scheduler_patience = 5;
  double threshold = 1e-6;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::weighted_ce;
  bool augment = true;
  AugmentationSpec augmentation;
  std::size_t workers = 1;

  void validate() const {
    if (!(lr > 0.0)) throw Error("train config: lr must be positive");
    if (batch_size == 0) throw Error("train config: batch_size must be >= 1");
    if (max_epochs < 1) throw Error("train config: max_epochs must be >= 1");
    if (early_stop_patience < 1 || scheduler_patience < 1) throw Error("train config: patiences must be >= 1");
    if (!(scheduler_factor > 0.0 && scheduler_factor < 1.0)) throw Error("train config: factor must be in (0, 1)");
    if (workers == 0) throw Error("train config: workers must be >= 1");
    augmentation.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"batch_size", c.batch_size},
       {"max_epochs", c.max_epochs},
       {"early_stop_patience", c.early_stop_patience},
       {"scheduler_factor", c.scheduler_factor},
       {"scheduler_patience", c.scheduler_patience},
       {"threshold", c.threshold},
       {"seed", c.seed},
       {"loss", c.loss == LossKind::weighted_ce ? "weighted_ce" : "composite"},
       {"augment", c.augment},
       {"workers", c.workers},
       {"augmentation",
        {{"rotation_deg", c.augmentation.rotation_deg},
         {"shear_deg", c.augmentation.shear_deg},
         {"brightness", c.augmentation.brightness},
         {"contrast", c.augmentation.contrast},
         {"hflip", c.augmentation.hflip},
         {"probability", c.augmentation.probability}}}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.scheduler_factor = j.value("scheduler_factor", c.scheduler_factor);
  c.scheduler_patience = j.value("scheduler_patience", c.scheduler_patience);
  c.threshold = j.value("threshold", c.threshold);
  c.seed = j.value("seed", c.seed);
  if (j.contains("loss")) {
    const auto s = j.at("loss").get<std::string>();
    if (s != "weighted_ce" && s != "composite") throw Error("train config: unknown loss " + s);
    c.loss = s == "weighted_ce" ? LossKind::weighted_ce : LossKind::composite;
  }
  c.augment = j.value("augment", c.augment);
  c.workers = j.value("workers", c.workers);
  if (j.contains("augmentation")) {
    const auto& a = j.at("augmentation");
    c.augmentation.rotation_deg = a.value("rotation_deg", c.augmentation.rotation_deg);
    c.augmentation.shear_deg = a.value("shear_deg", c.augmentation.shear_deg);
    c.augmentation.brightness = a.value("brightness", c.augmentation.brightness);
    c.augmentation.contrast = a.value("contrast", c.augmentation.contrast);
    c.augmentation.hflip = a.value("hflip", c.augmentation.hflip);
    c.augmentation.probability = a.value("probability", c.augmentation.probability);
  }
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0, val_loss = 0.0, lr = 0.0;
  double wall_seconds = 0.0;
  bool best = false;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::string stop_reason;
};

inline nlohmann::json to_json(const EpochRecord& e) {
  return {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss},
          {"lr", e.lr},       {"wall_seconds", e.wall_seconds}, {"best", e.best}};
}

// ---------------------------------------------------------------------------
// Data

struct Sample {
  GrayscaleSlice image;
  LabelMask mask;  // class indices, or 0/1 for binary stages
  std::string provenance;
};

namespace detail {
inline std::string provenance_list(const std::vector<const Sample*>& part) {
  std::string out;
  for (const auto* s : part) out += (out.empty() ? "" : ",") + s->provenance;
  return out;
}
}  // namespace detail

struct Batch {
  Tensor<float> images;
  std::vector<std::uint8_t> labels;  // N*H*W
};

inline Batch make_batch(const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw Error("make_batch: empty batch");
  const std::size_t w = samples[0]->image.width, h = samples[0]->image.height;
  std::vector<float> px;
  Batch b;
  px.reserve(samples.size() * w * h);
  for (const auto* s : samples) {
    if (s->image.width != w || s->image.height != h || s->mask.width != w || s->mask.height != h) {
      throw ShapeError("make_batch: sample " + s->provenance + " has different dimensions");
    }
    for (float v : s->image.pixels) {
      if (!std::isfinite(v)) throw NumericError("make_batch: non-finite pixel in " + s->provenance);
    }
    px.insert(px.end(), s->image.pixels.begin(), s->image.pixels.end());
    b.labels.insert(b.labels.end(), s->mask.labels.begin(), s->mask.labels.end());
  }
  b.images = Tensor<float>({samples.size(), 1, h, w}, std::move(px));
  return b;
}

template <typename Net>
Tensor<float> batch_loss(Net& net, const Batch& b, LossKind kind, const std::vector<double>& weights, Mode mode) {
  const Tensor<float> out = net.forward(b.images, mode);
  if (kind == LossKind::weighted_ce) {
    if (weights.empty()) {
      const std::vector<double> uniform(out.dim(1), 1.0);
      return weighted_cross_entropy(out, std::span<const std::uint8_t>(b.labels), std::span<const double>(uniform));
    }
    return weighted_cross_entropy(out, std::span<const std::uint8_t>(b.labels), std::span<const double>(weights));
  }
  std::vector<float> y(b.labels.begin(), b.labels.end());
  for (float& v : y) {
    if (v > 1.0f) throw Error("composite loss: binary target holds label " + std::to_string(v));
  }
  return composite_loss(out, std::span<const float>(y));
}

template <typename Net>
double evaluate_loss(Net& net, const std::vector<Sample>& data, LossKind kind, const std::vector<double>& weights,
                     std::size_t batch_size) {
  if (data.empty()) throw Error("evaluate_loss: no samples");
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); i += batch_size) {
    std::vector<const Sample*> part;
    for (std::size_t k = i; k < std::min(data.size(), i + batch_size); ++k) part.push_back(&data[k]);
    const double lv = batch_loss(net, make_batch(part), kind, weights, Mode::eval).item();
    if (!std::isfinite(lv)) {
      throw NumericError("evaluate_loss: non-finite loss on batch [" + detail::provenance_list(part) + "]");
    }
    total += lv * static_cast<double>(part.size());
  }
  return total / static_cast<double>(data.size());
}

// Eval-mode network output for each sample (probabilities, flattened C*H*W).
template <typename Net>
std::vector<std::vector<float>> predict(Net& net, const std::vector<GrayscaleSlice>& images, std::size_t batch_size) {
  std::vector<std::vector<float>> out;
  for (std::size_t i = 0; i < images.size(); i += batch_size) {
    const std::size_t n = std::min(images.size(), i + batch_size) - i;
    const std::size_t w = images[i].width, h = images[i].height;
    std::vector<float> px;
    for (std::size_t k = i; k < i + n; ++k) {
      if (images[k].width != w || images[k].height != h) throw ShapeError("predict: mixed image sizes");
      px.insert(px.end(), images[k].pixels.begin(), images[k].pixels.end());
    }
    const auto y = net.forward(Tensor<float>({n, 1, h, w}, std::move(px)), Mode::eval);
    const std::size_t per = y.numel() / n;
    for (std::size_t k = 0; k < n; ++k) out.emplace_back(y.vec().begin() + k * per, y.vec().begin() + (k + 1) * per);
  }
  return out;
}

// Augmented copies of the given samples. Sample j goes to worker j % W,
// and each worker walks its samples in order with its own stream, so the
// result depends on W but not on thread scheduling.
inline std::vector<Sample> augment_samples(const std::vector<const Sample*>& in, const AugmentationSpec& spec,
                                           Rng& epoch_rng, std::size_t workers) {
  std::vector<Sample> out(in.size());
  std::vector<Rng> streams;
  for (std::size_t w = 0; w < workers; ++w) streams.push_back(epoch_rng.split(w));
  auto run = [&](std::size_t w) {
    for (std::size_t j = w; j < in.size(); j += workers) {
      auto [img, msk] = augment(in[j]->image, in[j]->mask, spec, streams[w]);
      out[j] = Sample{std::move(img), std::move(msk), in[j]->provenance};
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::future<void>> jobs;
    for (std::size_t w = 0; w < workers; ++w) jobs.push_back(std::async(std::launch::async, run, w));
    for (auto& j : jobs) j.get();
  }
  return out;
}

struct TrainResult {
  std::vector<NamedArray> best_state;
  TrainLog log;
};

struct TrainHooks {
  std::string log_path;         // JSONL, one record per epoch; empty = no file
  std::string checkpoint_path;  // best state written on each improvement
  // Called after each epoch; returning true stops training.
  std::function<bool(const EpochRecord&)> on_epoch;
};

// Shuffled mini-batch training with per-epoch validation. With an empty
// validation set the training data doubles as validation data.
template <typename Net>
TrainResult train(Net& net, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainConfig& cfg, const std::vector<double>& class_weights = {},
                  const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_set.empty()) throw Error("train: empty training set");
  const auto& val = val_set.empty() ? train_set : val_set;
  auto params = net.parameters();
  AdamState<float> opt(params);
  PlateauScheduler sched(cfg.lr, cfg.scheduler_factor, cfg.scheduler_patience, cfg.threshold);
  EarlyStopping stopper(cfg.early_stop_patience, cfg.threshold);
  Rng rng(cfg.seed);
  std::ofstream log_file;
  if (!hooks.log_path.empty()) {
    log_file.open(hooks.log_path, std::ios::app);
    if (!log_file) throw Error("train: cannot open log " + hooks.log_path);
  }

  TrainResult res;
  res.best_state = net.state();
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng epoch_rng = rng.split(static_cast<std::uint64_t>(epoch));
    epoch_rng.shuffle(order);
    double total = 0.0;
    for (std::size_t i = 0; i < order.size(); i += cfg.batch_size) {
      std::vector<const Sample*> part;
      for (std::size_t k = i; k < std::min(order.size(), i + cfg.batch_size); ++k) part.push_back(&train_set[order[k]]);
      std::vector<Sample> augmented;
      if (cfg.augment) {
        augmented = augment_samples(part, cfg.augmentation, epoch_rng, cfg.workers);
        for (std::size_t k = 0; k < part.size(); ++k) part[k] = &augmented[k];
      }
      for (auto& p : params) p.zero_grad();
      const auto loss = batch_loss(net, make_batch(part), cfg.loss, class_weights, Mode::train);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch [" +
                           detail::provenance_list(part) + "]");
      }
      backward(loss);
      adam_step(params, opt, sched.lr);
      total += lv * static_cast<double>(part.size());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(train_set.size());
    rec.lr = sched.lr;
    rec.val_loss = evaluate_loss(net, val, cfg.loss, class_weights, cfg.batch_size);
    if (rec.val_loss < res.log.best_val_loss) {
      rec.best = true;
      res.log.best_val_loss = rec.val_loss;
      res.log.best_epoch = epoch;
      res.best_state = net.state();
      if (!hooks.checkpoint_path.empty()) save_checkpoint(hooks.checkpoint_path, res.best_state);
    }
    sched.step(rec.val_loss);
    const bool stop = stopper.step(rec.val_loss);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.epochs.push_back(rec);
    if (log_file) log_file << to_json(rec).dump() << "\n" << std::flush;
    if (hooks.on_epoch && hooks.on_epoch(rec)) {
      res.log.stop_reason = "callback";
      break;
    }
    if (stop) {
      res.log.stop_reason = "early_stop";
      break;
    }
  }
  if (res.log.stop_reason.empty()) res.log.stop_reason = "max_epochs";
  if (log_file) {
    log_file << nlohmann::json{{"stop_reason", res.log.stop_reason},
                               {"best_epoch", res.log.best_epoch},
                               {"best_val_loss", res.log.best_val_loss}}
                    .dump()
             << "\n";
  }
  return res;
}

}  // namespace enteroseg
