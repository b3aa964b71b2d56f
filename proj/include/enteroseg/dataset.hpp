#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <vector>

#include "enteroseg/error.hpp"
#include "enteroseg/image.hpp"
#include "enteroseg/rng.hpp"

namespace enteroseg {

// ---------------------------------------------------------------------------
// Fold planning

struct Fold {
  std::vector<std::string> train, val, test;
};

struct FoldPlan {
  static constexpr int kVersion = 1;
  int k = 0;
  std::uint64_t seed = 0;
  std::vector<Fold> folds;
};

namespace dataset_detail {

// Number of validation patients drawn from the `rem` non-test patients.
// The train and val shares of n are (1 - 1/k) split 7:1, which for k = 5 is
// the 70/10/20 split. Among all integer choices we keep the one whose
// worse deviation from the two targets is smallest, preferring a larger
// val set on ties.
inline std::size_t val_count(std::size_t n, std::size_t k, std::size_t rem) {
  const double keep = 1.0 - 1.0 / static_cast<double>(k);
  const double tv = keep / 8.0 * static_cast<double>(n);
  const double tt = keep * 7.0 / 8.0 * static_cast<double>(n);
  std::size_t best = 0;
  double best_dev = 1e300;
  for (std::size_t v = 0; v <= rem; ++v) {
    const double dev = std::max(std::abs(static_cast<double>(v) - tv),
                                std::abs(static_cast<double>(rem - v) - tt));
    if (dev <= best_dev + 1e-12) {
      best_dev = dev;
      best = v;
    }
  }
  return best;
}

}  // namespace dataset_detail

// Shuffles patients once, cuts k contiguous test chunks, then draws each
// fold's val set from a per-fold shuffle of the remaining patients.
inline FoldPlan stratified_kfold(const std::vector<std::string>& patients, int k, std::uint64_t seed) {
  if (k < 2) throw Error("stratified_kfold: k must be >= 2, got " + std::to_string(k));
  const std::size_t n = patients.size();
  if (n < static_cast<std::size_t>(k)) {
    throw Error("stratified_kfold: " + std::to_string(n) + " patients cannot fill " + std::to_string(k) +
                " folds");
  }
  if (std::set<std::string>(patients.begin(), patients.end()).size() != n) {
    throw Error("stratified_kfold: duplicate patient ids");
  }
  Rng rng(seed);
  std::vector<std::string> order = patients;
  std::sort(order.begin(), order.end());
  rng.shuffle(order);

  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  const std::size_t kk = static_cast<std::size_t>(k);
  for (std::size_t f = 0; f < kk; ++f) {
    const std::size_t lo = f * n / kk, hi = (f + 1) * n / kk;
    Fold fold;
    std::vector<std::string> rest;
    for (std::size_t i = 0; i < n; ++i) (i >= lo && i < hi ? fold.test : rest).push_back(order[i]);
    Rng fold_rng = rng.split(f);
    fold_rng.shuffle(rest);
    const std::size_t v = dataset_detail::val_count(n, kk, rest.size());
    fold.val.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(v));
    fold.train.assign(rest.begin() + static_cast<std::ptrdiff_t>(v), rest.end());
    for (auto* s : {&fold.train, &fold.val, &fold.test}) std::sort(s->begin(), s->end());
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

inline nlohmann::json to_json(const FoldPlan& p) {
  nlohmann::json j;
  j["version"] = FoldPlan::kVersion;
  j["k"] = p.k;
  j["seed"] = p.seed;
  j["folds"] = nlohmann::json::array();
  for (std::size_t f = 0; f < p.folds.size(); ++f) {
    j["folds"].push_back({{"fold", f},
                          {"train", p.folds[f].train},
                          {"val", p.folds[f].val},
                          {"test", p.folds[f].test}});
  }
  return j;
}

inline FoldPlan fold_plan_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != FoldPlan::kVersion) throw FormatError("fold plan: unsupported version");
    FoldPlan p;
    p.k = j.at("k").get<int>();
    p.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& f : j.at("folds")) {
      p.folds.push_back({f.at("train").get<std::vector<std::string>>(), f.at("val").get<std::vector<std::string>>(),
                         f.at("test").get<std::vector<std::string>>()});
    }
    if (p.folds.size() != static_cast<std::size_t>(p.k)) throw FormatError("fold plan: fold count != k");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("fold plan: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Class weights

struct ClassWeights {
  static constexpr int kVersion = 1;
  std::vector<double> weights;            // index = class
  std::vector<std::uint64_t> pixel_counts;

  double operator[](std::size_t c) const { return weights.at(c); }
};

struct ClassWeightOptions {
  std::size_t n_classes = kNumClasses;
  std::size_t boost_class = kAppendix;
  double boost_factor = 1.0;
  std::set<std::size_t> allowed_absent{kAppendix};
};

// Inverse pixel frequency, then the boost, then rescaling to mean 1.
// An allowed-absent class has no frequency to invert and takes the
// largest base weight among the present classes.
inline ClassWeights compute_class_weights(const std::vector<LabelMask>& masks, const ClassWeightOptions& opt = {}) {
  if (masks.empty()) throw Error("compute_class_weights: no masks");
  const std::size_t C = opt.n_classes;
  ClassWeights out;
  out.pixel_counts.assign(C, 0);
  std::uint64_t total = 0;
  for (const auto& m : masks) {
    for (auto l : m.labels) {
      if (l >= C) throw Error("compute_class_weights: label " + std::to_string(l) + " out of range");
      ++out.pixel_counts[l];
    }
    total += m.labels.size();
  }
  if (total == 0) throw Error("compute_class_weights: masks hold no pixels");
  out.weights.assign(C, 0.0);
  double max_present = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    if (out.pixel_counts[c] == 0) {
      if (!opt.allowed_absent.count(c)) {
        throw Error("compute_class_weights: class " + class_name(c) + " has no pixels");
      }
      continue;
    }
    out.weights[c] = static_cast<double>(total) / (static_cast<double>(C) * static_cast<double>(out.pixel_counts[c]));
    max_present = std::max(max_present, out.weights[c]);
  }
  if (max_present == 0.0) max_present = 1.0;
  for (std::size_t c = 0; c < C; ++c) {
    if (out.pixel_counts[c] == 0) out.weights[c] = max_present;
  }
  if (opt.boost_class < C) out.weights[opt.boost_class] *= opt.boost_factor;
  double mean = 0.0;
  for (double w : out.weights) mean += w;
  mean /= static_cast<double>(C);
  for (double& w : out.weights) w /= mean;
  return out;
}

inline ClassWeights uniform_class_weights(std::size_t n_classes = kNumClasses) {
  return ClassWeights{std::vector<double>(n_classes, 1.0), std::vector<std::uint64_t>(n_classes, 0)};
}

inline nlohmann::json to_json(const ClassWeights& w) {
  nlohmann::json j;
  j["version"] = ClassWeights::kVersion;
  j["weights"] = nlohmann::json::object();
  for (std::size_t c = 0; c < w.weights.size(); ++c) j["weights"][class_name(c)] = w.weights[c];
  j["pixel_counts"] = w.pixel_counts;
  return j;
}

inline ClassWeights class_weights_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != ClassWeights::kVersion) throw FormatError("class weights: unsupported version");
    ClassWeights w;
    w.pixel_counts = j.at("pixel_counts").get<std::vector<std::uint64_t>>();
    w.weights.assign(w.pixel_counts.size(), 0.0);
    for (const auto& [name, value] : j.at("weights").items()) {
      const std::size_t c = class_index(name);
      if (c >= w.weights.size()) throw FormatError("class weights: class " + name + " beyond pixel_counts");
      w.weights[c] = value.get<double>();
    }
    for (double v : w.weights) {
      if (!(v > 0.0)) throw FormatError("class weights: weights must be positive");
    }
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("class weights: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentationSpec {
  double rotation_deg = 20.0;
  double shear_deg = 2.0;
  double brightness = 0.2;  // fraction of the slice intensity range
  double contrast = 0.2;
  bool hflip = true;
  double probability = 0.5;  // each transform independently
  std::uint64_t seed = 0;

  void validate() const {
    if (!(probability >= 0.0 && probability <= 1.0)) throw Error("augmentation probability must be in [0, 1]");
    if (rotation_deg < 0 || shear_deg < 0 || brightness < 0 || contrast < 0) {
      throw Error("augmentation ranges must be non-negative");
    }
  }
};

// One draw of the random transform; zero fields mean "not applied".
struct AugmentSample {
  double rotation_deg = 0.0;
  double shear_deg = 0.0;
  bool flip = false;
  double brightness = 0.0;
  double contrast = 0.0;
};

// Draw order is fixed: rotation, shear, flip, intensity. Each gate consumes
// one draw and each applied transform one more per parameter.
inline AugmentSample sample_augmentation(const AugmentationSpec& spec, Rng& rng) {
  spec.validate();
  AugmentSample s;
  if (rng.bernoulli(spec.probability)) s.rotation_deg = rng.uniform(-spec.rotation_deg, spec.rotation_deg);
  if (rng.bernoulli(spec.probability)) s.shear_deg = rng.uniform(-spec.shear_deg, spec.shear_deg);
  if (rng.bernoulli(spec.probability)) s.flip = spec.hflip;
  if (rng.bernoulli(spec.probability)) {
    s.contrast = rng.uniform(-spec.contrast, spec.contrast);
    s.brightness = rng.uniform(-spec.brightness, spec.brightness);
  }
  return s;
}

namespace dataset_detail {

// Inverse of rotation(θ)·shear_x(φ) about the pixel-grid centre, as a 2x2
// matrix applied to (x - cx, y - cy).
inline std::array<double, 4> inverse_affine(double rot_deg, double shear_deg) {
  const double t = rot_deg * M_PI / 180.0, sh = std::tan(shear_deg * M_PI / 180.0);
  // forward = R · S with R = [c -s; s c], S = [1 sh; 0 1]
  const double c = std::cos(t), s = std::sin(t);
  const double a = c, b = c * sh - s, cc = s, d = s * sh + c;
  const double det = a * d - b * cc;
  return {d / det, -b / det, -cc / det, a / det};
}

template <typename V, typename Sampler>
std::vector<V> warp(std::size_t w, std::size_t h, const std::array<double, 4>& inv, Sampler sample) {
  std::vector<V> out(w * h);
  const double cx = (static_cast<double>(w) - 1) / 2, cy = (static_cast<double>(h) - 1) / 2;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      out[y * w + x] = sample(inv[0] * dx + inv[1] * dy + cx, inv[2] * dx + inv[3] * dy + cy);
    }
  }
  return out;
}

}  // namespace dataset_detail

// Applies a drawn transform to an aligned image/mask pair. Geometry is
// shared: bilinear for the image, nearest for the mask, zero fill outside.
// Intensity changes touch the image only.
inline std::pair<GrayscaleSlice, LabelMask> apply_augmentation(const GrayscaleSlice& image, const LabelMask& mask,
                                                                const AugmentSample& s) {
  if (image.width != mask.width || image.height != mask.height || image.pixels.size() != mask.labels.size()) {
    throw ShapeError("augment: image and mask dimensions differ");
  }
  GrayscaleSlice img = image;
  LabelMask msk = mask;
  const std::size_t w = image.width, h = image.height;
  if (s.rotation_deg != 0.0 || s.shear_deg != 0.0) {
    const auto inv = dataset_detail::inverse_affine(s.rotation_deg, s.shear_deg);
    const auto& src = image.pixels;
    auto px = [&](long x, long y) -> double {
      if (x < 0 || y < 0 || x >= static_cast<long>(w) || y >= static_cast<long>(h)) return 0.0;
      return src[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
    };
    img.pixels = dataset_detail::warp<float>(w, h, inv, [&](double sx, double sy) {
      const double fx = std::floor(sx), fy = std::floor(sy);
      const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
      const double ax = sx - fx, ay = sy - fy;
      return static_cast<float>((px(x0, y0) * (1 - ax) + px(x0 + 1, y0) * ax) * (1 - ay) +
                                (px(x0, y0 + 1) * (1 - ax) + px(x0 + 1, y0 + 1) * ax) * ay);
    });
    msk.labels = dataset_detail::warp<std::uint8_t>(w, h, inv, [&](double sx, double sy) -> std::uint8_t {
      const long x = std::lround(sx), y = std::lround(sy);
      if (x < 0 || y < 0 || x >= static_cast<long>(w) || y >= static_cast<long>(h)) return 0;
      return mask.labels[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
    });
  }
  if (s.flip) {
    for (std::size_t y = 0; y < h; ++y) {
      std::reverse(img.pixels.begin() + static_cast<std::ptrdiff_t>(y * w),
                   img.pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * w));
      std::reverse(msk.labels.begin() + static_cast<std::ptrdiff_t>(y * w),
                   msk.labels.begin() + static_cast<std::ptrdiff_t>((y + 1) * w));
    }
  }
  if (s.brightness != 0.0 || s.contrast != 0.0) {
    const auto [lo, hi] = std::minmax_element(image.pixels.begin(), image.pixels.end());
    const double range = image.pixels.empty() ? 0.0 : *hi - *lo;
    for (float& p : img.pixels) p = static_cast<float>(p * (1.0 + s.contrast) + s.brightness * range);
  }
  return {std::move(img), std::move(msk)};
}

inline std::pair<GrayscaleSlice, LabelMask> augment(const GrayscaleSlice& image, const LabelMask& mask,
                                                     const AugmentationSpec& spec, Rng& rng) {
  if (image.width != mask.width || image.height != mask.height) {
    throw ShapeError("augment: image and mask dimensions differ");
  }
  return apply_augmentation(image, mask, sample_augmentation(spec, rng));
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) throw Error("cannot open " + path + " for writing");
  f << j.dump(2) << "\n";
  if (!f) throw Error("write failed: " + path);
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace enteroseg
