#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <future>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "enteroseg/checkpoint.hpp"
#include "enteroseg/dataset.hpp"
#include "enteroseg/error.hpp"
#include "enteroseg/image.hpp"
#include "enteroseg/metrics.hpp"
#include "enteroseg/nets.hpp"
#include "enteroseg/nifti.hpp"
#include "enteroseg/phantom.hpp"
#include "enteroseg/png.hpp"
#include "enteroseg/roi.hpp"
#include "enteroseg/training.hpp"

namespace enteroseg {

// An upstream artifact is missing or was produced under a different config.
class ArtifactError : public Error {
 public:
  using Error::Error;
};

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Configuration

struct CoarseStageConfig {
  CoarseNetConfig net;
  TrainConfig train;
  bool class_weighting = true;  // false = uniform weights
  std::size_t boost_class = kAppendix;
  double boost_factor = 7.0;
  std::set<std::size_t> allowed_absent{kAppendix};

  CoarseStageConfig() {
    train.loss = LossKind::weighted_ce;
    train.scheduler_patience = 5;
  }
};

struct OrganStageConfig {
  BinaryNetConfig net;  // net.input_size is the ROI patch size
  TrainConfig train;
  std::size_t roi_pad = kDefaultRoiPad;
  std::vector<std::uint8_t> classes;  // empty = every organ class of the coarse net

  OrganStageConfig() {
    train.loss = LossKind::composite;
    train.scheduler_patience = 15;
  }
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  PhantomSpec phantom;
  std::string data_root;  // empty = <out>/phantom
  int axis = kCoronalAxis;
  int k = 5;
  CoarseStageConfig coarse;
  OrganStageConfig organ;
  HdMode hd_mode = HdMode::per_slice;

  std::vector<std::uint8_t> organ_classes() const {
    if (!organ.classes.empty()) return organ.classes;
    std::vector<std::uint8_t> out;
    for (std::size_t c = 1; c < coarse.net.n_classes; ++c) out.push_back(static_cast<std::uint8_t>(c));
    return out;
  }

  void validate() const {
    plane_axes(axis);
    if (k < 2) throw Error("config: k must be >= 2");
    coarse.train.validate();
    organ.train.validate();
    if (coarse.train.loss != LossKind::weighted_ce) throw Error("config: the coarse stage trains with weighted_ce");
    if (organ.train.loss != LossKind::composite) throw Error("config: organ stages train with the composite loss");
    for (auto c : organ_classes()) {
      if (c == 0 || c >= coarse.net.n_classes) {
        throw Error("config: organ class " + std::to_string(c) + " outside 1.." +
                    std::to_string(coarse.net.n_classes - 1));
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
  std::vector<std::size_t> absent(c.coarse.allowed_absent.begin(), c.coarse.allowed_absent.end());
  j = {{"seed", c.seed},
       {"phantom", c.phantom},
       {"data", {{"root", c.data_root}, {"axis", c.axis}}},
       {"split", {{"k", c.k}}},
       {"coarse",
        {{"net", c.coarse.net},
         {"train", c.coarse.train},
         {"class_weighting", c.coarse.class_weighting},
         {"boost_class", c.coarse.boost_class},
         {"boost_factor", c.coarse.boost_factor},
         {"allowed_absent", absent}}},
       {"organ",
        {{"net", c.organ.net}, {"train", c.organ.train}, {"roi_pad", c.organ.roi_pad}, {"classes", c.organ.classes}}},
       {"evaluate", {{"hd_mode", c.hd_mode == HdMode::per_slice ? "per_slice" : "volume"}}}};
}

// Missing keys keep their defaults; the phantom seed defaults to the
// pipeline seed.
inline void from_json(const nlohmann::json& j, PipelineConfig& c) {
  c.seed = j.value("seed", c.seed);
  c.phantom.seed = c.seed;
  if (j.contains("phantom")) from_json(j.at("phantom"), c.phantom);
  if (j.contains("data")) {
    c.data_root = j["data"].value("root", c.data_root);
    c.axis = j["data"].value("axis", c.axis);
  }
  if (j.contains("split")) c.k = j["split"].value("k", c.k);
  if (j.contains("coarse")) {
    const auto& s = j.at("coarse");
    if (s.contains("net")) c.coarse.net = s.at("net").get<CoarseNetConfig>();
    if (s.contains("train")) from_json(s.at("train"), c.coarse.train);
    c.coarse.class_weighting = s.value("class_weighting", c.coarse.class_weighting);
    c.coarse.boost_class = s.value("boost_class", c.coarse.boost_class);
    c.coarse.boost_factor = s.value("boost_factor", c.coarse.boost_factor);
    if (s.contains("allowed_absent")) {
      const auto v = s.at("allowed_absent").get<std::vector<std::size_t>>();
      c.coarse.allowed_absent = {v.begin(), v.end()};
    }
  }
  if (j.contains("organ")) {
    const auto& s = j.at("organ");
    if (s.contains("net")) c.organ.net = s.at("net").get<BinaryNetConfig>();
    if (s.contains("train")) from_json(s.at("train"), c.organ.train);
    c.organ.roi_pad = s.value("roi_pad", c.organ.roi_pad);
    if (s.contains("classes")) c.organ.classes = s.at("classes").get<std::vector<std::uint8_t>>();
  }
  if (j.contains("evaluate")) {
    const auto mode = j["evaluate"].value("hd_mode", std::string("per_slice"));
    if (mode != "per_slice" && mode != "volume") throw Error("config: hd_mode must be per_slice or volume");
    c.hd_mode = mode == "volume" ? HdMode::volume : HdMode::per_slice;
  }
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
  try {
    return read_json_file(path).get<PipelineConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Patient data on disk

struct PatientData {
  std::string id;
  FloatVolume image;
  LabelVolume labels;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
};

struct ConvertReport {
  std::vector<std::string> converted;
  std::vector<std::pair<std::string, std::string>> failed;  // patient, reason
  std::size_t files_written = 0, files_unchanged = 0;
};

struct StageResult {
  MetricsReport stage1, stage2;
  nlohmann::json per_patient;
};

namespace pipeline_detail {

namespace fs = std::filesystem;

inline std::string slice_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu.png", i);
  return buf;
}

// Writes only when the content differs; returns true when it wrote.
inline bool write_if_changed(const fs::path& p, std::span<const std::uint8_t> bytes) {
  if (fs::exists(p)) {
    const auto old = read_file_bytes(p.string());
    if (old.size() == bytes.size() && std::equal(old.begin(), old.end(), bytes.begin())) return false;
  }
  fs::create_directories(p.parent_path());
  write_file_bytes(p.string(), bytes);
  return true;
}

inline std::optional<fs::path> find_volume(const fs::path& dir, const std::string& stem) {
  for (const char* ext : {".nii.gz", ".nii"}) {
    const auto p = dir / (stem + ext);
    if (fs::exists(p)) return p;
  }
  return std::nullopt;
}

inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag) {
  return fnv1a64(tag, fnv1a64(std::to_string(seed)));
}

inline bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

// Per-class mean over patients. HD95 averages the patients where it is
// defined; voxel counts are summed.
inline ClassResult mean_over_patients(const std::vector<ClassResult>& rs) {
  if (rs.empty()) throw Error("mean_over_patients: no results");
  ClassResult out;
  out.class_id = rs[0].class_id;
  out.dsc = out.iou = 0.0;
  double hd = 0.0;
  std::size_t nhd = 0;
  for (const auto& r : rs) {
    out.dsc += r.dsc;
    out.iou += r.iou;
    out.pred_voxels += r.pred_voxels;
    out.gt_voxels += r.gt_voxels;
    out.detection_miss = out.detection_miss || r.detection_miss;
    if (r.hd95) {
      hd += *r.hd95;
      ++nhd;
    }
  }
  out.dsc /= static_cast<double>(rs.size());
  out.iou /= static_cast<double>(rs.size());
  if (nhd) out.hd95 = hd / static_cast<double>(nhd);
  return out;
}

inline nlohmann::json class_result_json(const ClassResult& r) {
  return {{"class_id", r.class_id},
          {"dsc", r.dsc},
          {"iou", r.iou},
          {"hd95", r.hd95 ? nlohmann::json(*r.hd95) : nlohmann::json(nullptr)},
          {"pred_voxels", r.pred_voxels},
          {"gt_voxels", r.gt_voxels},
          {"detection_miss", r.detection_miss}};
}

inline ClassResult class_result_from_json(const nlohmann::json& j) {
  ClassResult r;
  r.class_id = j.at("class_id").get<std::uint8_t>();
  r.dsc = j.at("dsc");
  r.iou = j.at("iou");
  if (!j.at("hd95").is_null()) r.hd95 = j.at("hd95").get<double>();
  r.pred_voxels = j.at("pred_voxels");
  r.gt_voxels = j.at("gt_voxels");
  r.detection_miss = j.at("detection_miss");
  return r;
}

}  // namespace pipeline_detail

// Resized, normalized training slices from a volume pair.
inline std::vector<Sample> volume_samples(const PatientData& p, std::size_t size, int axis) {
  const auto slices = volume_to_slices(p.image, axis, p.id);
  const auto masks = volume_to_masks(p.labels, axis);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < slices.size(); ++i) {
    out.push_back({resize(normalize_slice(slices[i]), size, size, Interp::bilinear), resize(masks[i], size, size),
                   p.id + "/" + std::to_string(i)});
  }
  return out;
}

// Coarse segmentation of a whole volume: per slice, softmax at network
// resolution, bilinear back to the slice size, then argmax.
template <typename Net>
LabelVolume predict_volume(Net& net, const FloatVolume& image, std::size_t size, std::size_t n_classes, int axis,
                           std::size_t batch = 16) {
  auto slices = volume_to_slices(image, axis);
  std::vector<GrayscaleSlice> inputs;
  for (const auto& s : slices) inputs.push_back(resize(normalize_slice(s), size, size, Interp::bilinear));
  const auto probs = predict(net, inputs, batch);
  std::vector<LabelMask> masks;
  for (std::size_t i = 0; i < slices.size(); ++i) {
    const std::size_t w = slices[i].width, h = slices[i].height;
    std::vector<float> best(w * h, -1.0f);
    LabelMask m{w, h, std::vector<std::uint8_t>(w * h, 0)};
    for (std::size_t c = 0; c < n_classes; ++c) {
      GrayscaleSlice pc;
      pc.width = pc.height = size;
      pc.pixels.assign(probs[i].begin() + c * size * size, probs[i].begin() + (c + 1) * size * size);
      const auto up = resize(pc, w, h, Interp::bilinear);
      for (std::size_t k = 0; k < w * h; ++k) {
        if (up.pixels[k] > best[k]) {
          best[k] = up.pixels[k];
          m.labels[k] = static_cast<std::uint8_t>(c);
        }
      }
    }
    masks.push_back(std::move(m));
  }
  return stack_predictions(masks, axis);
}

// Stage-2 probability volume for one class from its ROI patch set.
template <typename Net>
FloatVolume predict_roi(Net& net, const RoiPatchSet& set, const std::array<std::size_t, 3>& dims,
                        std::size_t batch = 16) {
  return map_back(predict(net, set.images, batch), set, dims);
}

// ---------------------------------------------------------------------------
// The pipeline: every command reads its inputs from, and records its
// outputs in, the manifest at <out>/manifest.json.

class Pipeline {
 public:
  Pipeline(PipelineConfig cfg, std::string out) : cfg_(std::move(cfg)), out_(std::move(out)) {
    cfg_.validate();
    std::filesystem::create_directories(out_);
    if (std::filesystem::exists(manifest_path())) manifest_ = read_json_file(manifest_path().string());
    if (!manifest_.is_object()) manifest_ = nlohmann::json::object();
    manifest_["version"] = 1;
    if (!manifest_.contains("artifacts")) manifest_["artifacts"] = nlohmann::json::object();
  }

  const PipelineConfig& config() const { return cfg_; }
  const nlohmann::json& manifest() const { return manifest_; }
  std::filesystem::path out() const { return out_; }
  std::filesystem::path data_root() const {
    return cfg_.data_root.empty() ? out_ / "phantom" : std::filesystem::path(cfg_.data_root);
  }
  std::filesystem::path fold_dir(int fold) const { return out_ / ("fold" + std::to_string(fold)); }

  // Config hashes, chained so that an artifact's hash covers everything
  // upstream of it.
  std::string stage_hash(const std::string& stage) const {
    const nlohmann::json j = cfg_;
    std::string h = hex64(fnv1a64(j["phantom"].dump()));
    auto chain = [&](const nlohmann::json& part) { h = hex64(fnv1a64(part.dump(), fnv1a64(h))); };
    if (stage == "phantom") return h;
    chain(j["data"]);
    if (stage == "convert") return h;
    chain({j["split"], j["seed"]});
    if (stage == "split") return h;
    chain(j["coarse"]);
    if (stage == "coarse") return h;
    chain({j["organ"]["roi_pad"], j["organ"]["net"]["input_size"], nlohmann::json(cfg_.organ_classes())});
    if (stage == "roi") return h;
    chain(j["organ"]);
    if (stage == "organ") return h;
    chain(j["evaluate"]);
    if (stage == "evaluate") return h;
    throw Error("unknown stage " + stage);
  }

  // ---- phantom

  nlohmann::json phantom() {
    auto stats = write_phantom_dataset(cfg_.phantom, (out_ / "phantom").string());
    record("phantom", "phantom", "phantom");
    return stats;
  }

  // ---- convert

  ConvertReport convert() {
    namespace fs = std::filesystem;
    using namespace pipeline_detail;
    const fs::path root = data_root();
    if (cfg_.data_root.empty()) require("phantom", "phantom", "run `enteroseg phantom` first or set data.root");
    if (!fs::is_directory(root)) throw ArtifactError("dataset root " + root.string() + " is not a directory");
    std::vector<std::string> patients;
    for (const auto& e : fs::directory_iterator(root)) {
      if (e.is_directory()) patients.push_back(e.path().filename().string());
    }
    std::sort(patients.begin(), patients.end());
    if (patients.empty()) throw ArtifactError("dataset root " + root.string() + " holds no patient directories");

    struct One {
      std::string error;
      std::size_t written = 0, unchanged = 0;
    };
    std::vector<std::future<One>> jobs;
    for (const auto& p : patients) {
      jobs.push_back(std::async(std::launch::async, [this, p, root] {
        One r;
        try {
          convert_patient(root / p, p, r.written, r.unchanged);
        } catch (const std::exception& e) {
          r.error = e.what();
        }
        return r;
      }));
    }
    ConvertReport rep;
    nlohmann::json j;
    j["converted"] = nlohmann::json::array();
    j["failed"] = nlohmann::json::array();
    for (std::size_t i = 0; i < patients.size(); ++i) {
      const One r = jobs[i].get();
      rep.files_written += r.written;
      rep.files_unchanged += r.unchanged;
      if (r.error.empty()) {
        rep.converted.push_back(patients[i]);
        j["converted"].push_back(patients[i]);
      } else {
        rep.failed.emplace_back(patients[i], r.error);
        j["failed"].push_back({{"patient", patients[i]}, {"reason", r.error}});
      }
    }
    if (rep.converted.empty()) throw FormatError("convert: no patient could be converted");
    write_json_file((out_ / "slices" / "patients.json").string(), j);
    record("convert", "slices", "convert");
    return rep;
  }

  std::vector<std::string> patients() const {
    require("convert", "convert", "run `enteroseg convert`");
    const auto j = read_json_file((out_ / "slices" / "patients.json").string());
    return j.at("converted").get<std::vector<std::string>>();
  }

  PatientData load_patient(const std::string& id) const {
    namespace fs = std::filesystem;
    using namespace pipeline_detail;
    const fs::path base = out_ / "slices";
    const auto meta = read_json_file((base / "meta" / (id + ".json")).string());
    const float lo = meta.at("lo"), hi = meta.at("hi");
    const int axis = meta.at("axis");
    const std::size_t n = meta.at("n_slices");
    std::vector<GrayscaleSlice> imgs;
    std::vector<LabelMask> masks;
    for (std::size_t i = 0; i < n; ++i) {
      auto s = decode_gray_png(read_file_bytes((base / "images" / id / slice_name(i)).string()));
      for (auto& v : s.pixels) v = lo + v / 255.0f * (hi - lo);
      imgs.push_back(std::move(s));
      masks.push_back(decode_mask_png(read_file_bytes((base / "masks" / id / slice_name(i)).string())));
    }
    PatientData p;
    p.id = id;
    p.image = stack_slices(imgs, axis);
    p.labels = stack_predictions(masks, axis);
    p.spacing = meta.at("spacing").get<std::array<double, 3>>();
    return p;
  }

  // ---- split

  FoldPlan split() {
    const auto plan = stratified_kfold(patients(), cfg_.k, cfg_.seed);
    std::filesystem::create_directories(out_ / "split");
    write_json_file((out_ / "split" / "folds.json").string(), to_json(plan));
    record("split", "split/folds.json", "split");
    return plan;
  }

  FoldPlan fold_plan() const {
    require("split", "split", "run `enteroseg split`");
    return fold_plan_from_json(read_json_file((out_ / "split" / "folds.json").string()));
  }

  const Fold& fold(const FoldPlan& plan, int f) const {
    if (f < 0 || f >= static_cast<int>(plan.folds.size())) {
      throw Error("fold " + std::to_string(f) + " out of range: the plan has " + std::to_string(plan.folds.size()) +
                  " folds");
    }
    return plan.folds[static_cast<std::size_t>(f)];
  }

  // ---- stage 1

  TrainLog train_coarse(int f) {
    namespace fs = std::filesystem;
    using namespace pipeline_detail;
    const auto plan = fold_plan();
    const Fold& fd = fold(plan, f);
    const std::size_t size = cfg_.coarse.net.input_size;
    std::vector<Sample> tr, va;
    std::vector<LabelMask> masks;
    for (const auto& p : fd.train) {
      const auto d = load_patient(p);
      for (auto& s : volume_samples(d, size, cfg_.axis)) {
        masks.push_back(s.mask);
        tr.push_back(std::move(s));
      }
    }
    for (const auto& p : fd.val) {
      for (auto& s : volume_samples(load_patient(p), size, cfg_.axis)) va.push_back(std::move(s));
    }
    ClassWeights weights = uniform_class_weights(cfg_.coarse.net.n_classes);
    if (cfg_.coarse.class_weighting) {
      ClassWeightOptions opt;
      opt.n_classes = cfg_.coarse.net.n_classes;
      opt.boost_class = cfg_.coarse.boost_class;
      opt.boost_factor = cfg_.coarse.boost_factor;
      opt.allowed_absent = cfg_.coarse.allowed_absent;
      weights = compute_class_weights(masks, opt);
    }
    const fs::path dir = fold_dir(f) / "coarse";
    fs::create_directories(dir);
    fs::remove(dir / "log.jsonl");
    write_json_file((dir / "class_weights.json").string(), to_json(weights));
    auto tc = cfg_.coarse.train;
    tc.seed = derive_seed(cfg_.seed, "coarse/train/" + std::to_string(f));
    CoarseNet<float> net(cfg_.coarse.net, derive_seed(cfg_.seed, "coarse/init/" + std::to_string(f)));
    TrainHooks hooks;
    hooks.log_path = (dir / "log.jsonl").string();
    hooks.checkpoint_path = (dir / "best.ckpt").string();
    const auto res = train(net, tr, va, tc, weights.weights, hooks);
    save_checkpoint(hooks.checkpoint_path, res.best_state);
    write_json_file((dir / "meta.json").string(), {{"fold", f},
                                                    {"train", fd.train},
                                                    {"val", fd.val},
                                                    {"best_epoch", res.log.best_epoch},
                                                    {"best_val_loss", res.log.best_val_loss},
                                                    {"stop_reason", res.log.stop_reason}});
    record(fkey(f, "coarse"), rel(dir), "coarse");
    return res.log;
  }

  // Writes predicted label trees for every patient of the fold; training
  // patients are needed too, for their stage-2 ROIs.
  void predict_coarse(int f) {
    namespace fs = std::filesystem;
    using namespace pipeline_detail;
    const auto plan = fold_plan();
    const Fold& fd = fold(plan, f);
    require(fkey(f, "coarse"), "coarse", "run `enteroseg train-coarse --fold " + std::to_string(f) + "`");
    CoarseNet<float> net(cfg_.coarse.net, 0);
    net.load_state(load_checkpoint((fold_dir(f) / "coarse" / "best.ckpt").string()));
    const fs::path dir = fold_dir(f) / "coarse_pred";
    std::vector<std::string> all = fd.train;
    all.insert(all.end(), fd.val.begin(), fd.val.end());
    all.insert(all.end(), fd.test.begin(), fd.test.end());
    for (const auto& p : all) {
      const auto d = load_patient(p);
      const auto pred = predict_volume(net, d.image, cfg_.coarse.net.input_size, cfg_.coarse.net.n_classes, cfg_.axis);
      const auto masks = volume_to_masks(pred, cfg_.axis);
      for (std::size_t i = 0; i < masks.size(); ++i) write_if_changed(dir / p / slice_name(i), encode_mask_png(masks[i]));
    }
    record(fkey(f, "coarse_pred"), rel(dir), "coarse");
  }

  LabelVolume load_prediction(int f, const std::string& stage_dir, const std::string& patient) const {
    namespace fs = std::filesystem;
    const fs::path dir = fold_dir(f) / stage_dir / patient;
    std::vector<LabelMask> masks;
    for (std::size_t i = 0; fs::exists(dir / pipeline_detail::slice_name(i)); ++i) {
      masks.push_back(decode_mask_png(read_file_bytes((dir / pipeline_detail::slice_name(i)).string())));
    }
    if (masks.empty()) throw ArtifactError("no predicted slices under " + dir.string());
    return stack_predictions(masks, cfg_.axis);
  }

  // ---- stage 2

  // ROIs come from the coarse prediction. A training or validation patient
  // whose prediction misses the class falls back to the ground-truth box;
  // a test patient gets no ROI, which evaluation counts as a miss.
  void extract_roi(int f, std::optional<std::uint8_t> only = std::nullopt) {
    namespace fs = std::filesystem;
    const auto plan = fold_plan();
    const Fold& fd = fold(plan, f);
    require(fkey(f, "coarse_pred"), "coarse", "run `enteroseg predict-coarse --fold " + std::to_string(f) + "`");
    const auto classes = selected_classes(only);
    const std::size_t size = cfg_.organ.net.input_size;
    std::map<std::uint8_t, nlohmann::json> index;
    for (auto c : classes) index[c] = {{"class", class_name(c)}, {"class_id", c}, {"patients", nlohmann::json::object()}};
    auto role_of = [&](const std::string& p) {
      return pipeline_detail::contains(fd.test, p) ? "test" : pipeline_detail::contains(fd.val, p) ? "val" : "train";
    };
    std::vector<std::string> all = fd.train;
    all.insert(all.end(), fd.val.begin(), fd.val.end());
    all.insert(all.end(), fd.test.begin(), fd.test.end());
    for (const auto& p : all) {
      const auto d = load_patient(p);
      const auto pred = load_prediction(f, "coarse_pred", p);
      const std::string role = role_of(p);
      for (auto c : classes) {
        auto box = class_bbox(pred, c);
        std::string source = "prediction";
        if (!box && role != "test") {
          box = class_bbox(d.labels, c);
          source = "ground_truth";
        }
        const fs::path dir = fold_dir(f) / "roi" / class_name(c) / p;
        fs::remove_all(dir);
        nlohmann::json entry = {{"role", role}, {"source", box ? source : "none"}};
        if (box) {
          auto set = enteroseg::extract_roi(d.image, d.labels, pad_bbox(*box, cfg_.organ.roi_pad, d.image.dims), c, size, size,
                                 cfg_.axis);
          set.patient = p;
          set.pad = cfg_.organ.roi_pad;
          save_roi_patch_set(dir.string(), set);
          entry["bbox"] = to_json(set.bbox);
        }
        index[c]["patients"][p] = entry;
      }
    }
    for (auto c : classes) {
      const fs::path dir = fold_dir(f) / "roi" / class_name(c);
      fs::create_directories(dir);
      write_json_file((dir / "index.json").string(), index[c]);
      record(fkey(f, "roi/" + class_name(c)), rel(dir), "roi");
    }
  }

  std::map<std::uint8_t, TrainLog> train_organ(int f, std::optional<std::uint8_t> only = std::nullopt) {
    namespace fs = std::filesystem;
    using namespace pipeline_detail;
    const auto plan = fold_plan();
    const Fold& fd = fold(plan, f);
    std::map<std::uint8_t, TrainLog> logs;
    for (auto c : selected_classes(only)) {
      const std::string key = fkey(f, "roi/" + class_name(c));
      require(key, "roi", "run `enteroseg extract-roi --fold " + std::to_string(f) + "`");
      const fs::path roi = fold_dir(f) / "roi" / class_name(c);
      const auto index = read_json_file((roi / "index.json").string());
      auto gather = [&](const std::vector<std::string>& ps) {
        std::vector<Sample> out;
        for (const auto& p : ps) {
          if (index.at("patients").at(p).at("source") == "none") continue;
          const auto set = load_roi_patch_set((roi / p).string());
          for (std::size_t i = 0; i < set.size(); ++i) {
            out.push_back({set.images[i], set.masks[i], p + "/" + std::to_string(set.images[i].provenance.index)});
          }
        }
        return out;
      };
      const auto tr = gather(fd.train), va = gather(fd.val);
      if (tr.empty()) throw Error("train-organ: no ROI patches for class " + class_name(c) + " in fold " + std::to_string(f));
      const fs::path dir = fold_dir(f) / "organ" / class_name(c);
      fs::create_directories(dir);
      fs::remove(dir / "log.jsonl");
      auto tc = cfg_.organ.train;
      const std::string tag = std::to_string(f) + "/" + std::to_string(c);
      tc.seed = derive_seed(cfg_.seed, "organ/train/" + tag);
      BinaryNet<float> net(cfg_.organ.net, derive_seed(cfg_.seed, "organ/init/" + tag));
      TrainHooks hooks;
      hooks.log_path = (dir / "log.jsonl").string();
      hooks.checkpoint_path = (dir / "best.ckpt").string();
      const auto res = train(net, tr, va, tc, {}, hooks);
      save_checkpoint(hooks.checkpoint_path, res.best_state);
      write_json_file((dir / "meta.json").string(), {{"fold", f},
                                                      {"class", class_name(c)},
                                                      {"train", fd.train},
                                                      {"val", fd.val},
                                                      {"patches", {tr.size(), va.size()}},
                                                      {"best_epoch", res.log.best_epoch},
                                                      {"best_val_loss", res.log.best_val_loss},
                                                      {"stop_reason", res.log.stop_reason}});
      record(fkey(f, "organ/" + class_name(c)), rel(dir), "organ");
      logs[c] = res.log;
    }
    return logs;
  }

  // ---- evaluation

  StageResult evaluate(int f) {
    namespace fs = std::filesystem;
    using namespace pipeline_detail;
    const auto plan = fold_plan();
    const Fold& fd = fold(plan, f);
    const auto classes = cfg_.organ_classes();
    require(fkey(f, "coarse_pred"), "coarse", "run `enteroseg predict-coarse --fold " + std::to_string(f) + "`");
    std::map<std::uint8_t, BinaryNet<float>> nets;
    for (auto c : classes) {
      require(fkey(f, "organ/" + class_name(c)), "organ",
              "run `enteroseg train-organ --fold " + std::to_string(f) + " --class " + class_name(c) + "`");
      guard_leakage(fd, fold_dir(f) / "organ" / class_name(c) / "meta.json");
      auto& net = nets.try_emplace(c, cfg_.organ.net, 0).first->second;
      net.load_state(load_checkpoint((fold_dir(f) / "organ" / class_name(c) / "best.ckpt").string()));
    }
    guard_leakage(fd, fold_dir(f) / "coarse" / "meta.json");

    std::map<std::uint8_t, std::vector<ClassResult>> s1, s2;
    nlohmann::json per_patient = nlohmann::json::object();
    for (const auto& p : fd.test) {
      const auto d = load_patient(p);
      const auto coarse = load_prediction(f, "coarse_pred", p);
      std::vector<std::pair<std::uint8_t, FloatVolume>> probs;
      nlohmann::json pj = {{"stage1", nlohmann::json::array()}, {"stage2", nlohmann::json::array()}};
      for (auto c : classes) {
        const auto r1 = evaluate_class(coarse, d.labels, c, d.spacing, cfg_.hd_mode);
        s1[c].push_back(r1);
        pj["stage1"].push_back(class_result_json(r1));

        const fs::path roi = fold_dir(f) / "roi" / class_name(c);
        const auto index = read_json_file((roi / "index.json").string());
        const auto& entry = index.at("patients").at(p);
        if (entry.at("role") != "test") throw Error("leakage guard: ROI index does not mark " + p + " as a test patient");
        FloatVolume prob(d.image.dims, 0.0f);
        if (entry.at("source") != "none") prob = predict_roi(nets.at(c), load_roi_patch_set((roi / p).string()), d.image.dims);
        LabelVolume bin(d.image.dims, 0);
        for (std::size_t i = 0; i < bin.size(); ++i) bin.data[i] = prob.data[i] > 0.5f ? c : 0;
        const auto r2 = evaluate_class(bin, d.labels, c, d.spacing, cfg_.hd_mode);
        s2[c].push_back(r2);
        pj["stage2"].push_back(class_result_json(r2));
        probs.emplace_back(c, std::move(prob));
      }
      const auto fused = fuse_organ_probabilities(probs, d.image.dims, 0.5f);
      const auto masks = volume_to_masks(fused, cfg_.axis);
      for (std::size_t i = 0; i < masks.size(); ++i) {
        write_if_changed(fold_dir(f) / "stage2_pred" / p / slice_name(i), encode_mask_png(masks[i]));
      }
      per_patient[p] = pj;
    }
    StageResult out;
    out.stage1 = summarize(s1, std::to_string(f), "stage1");
    out.stage2 = summarize(s2, std::to_string(f), "stage2");
    out.per_patient = per_patient;
    const fs::path dir = fold_dir(f) / "eval";
    fs::create_directories(dir);
    write_json_file((dir / "stage1.json").string(), to_json(out.stage1));
    write_json_file((dir / "stage2.json").string(), to_json(out.stage2));
    write_json_file((dir / "per_patient.json").string(), per_patient);
    write_text((dir / "table.txt").string(), format_table(out.stage2, &out.stage1));
    record(fkey(f, "eval"), rel(dir), "evaluate");
    return out;
  }

  // Stage-over-stage comparison pooled over every evaluated fold.
  std::string report() {
    namespace fs = std::filesystem;
    using namespace pipeline_detail;
    std::map<std::uint8_t, std::vector<ClassResult>> s1, s2;
    std::vector<int> folds;
    for (int f = 0; f < cfg_.k; ++f) {
      if (!manifest_["artifacts"].contains(fkey(f, "eval"))) continue;
      require(fkey(f, "eval"), "evaluate", "");
      folds.push_back(f);
      const auto pp = read_json_file((fold_dir(f) / "eval" / "per_patient.json").string());
      for (const auto& [p, j] : pp.items()) {
        for (const auto& r : j.at("stage1")) {
          const auto cr = class_result_from_json(r);
          s1[cr.class_id].push_back(cr);
        }
        for (const auto& r : j.at("stage2")) {
          const auto cr = class_result_from_json(r);
          s2[cr.class_id].push_back(cr);
        }
      }
    }
    if (folds.empty()) throw ArtifactError("report: no evaluated folds; run `enteroseg evaluate --fold N` first");
    const auto r1 = summarize(s1, "all", "stage1"), r2 = summarize(s2, "all", "stage2");
    std::string folds_str;
    for (int f : folds) folds_str += (folds_str.empty() ? "" : ",") + std::to_string(f);
    std::string text = "stage 2 (organ-wise refinement) vs stage 1 (coarse), folds " + folds_str + "\n";
    text += "deltas are stage 2 minus stage 1; HD95 in mm\n\n" + format_table(r2, &r1);
    write_text((out_ / "report.txt").string(), text);
    write_json_file((out_ / "report.json").string(), {{"folds", folds}, {"stage1", to_json(r1)}, {"stage2", to_json(r2)}});
    record("report", "report.txt", "evaluate");
    return text;
  }

  // Fails when an artifact is absent, its files are gone, or it was made
  // under a different config.
  void require(const std::string& key, const std::string& stage, const std::string& hint) const {
    const auto& a = manifest_["artifacts"];
    auto fail = [&](const std::string& why) {
      throw ArtifactError("missing upstream artifact '" + key + "': " + why + (hint.empty() ? "" : "; " + hint));
    };
    if (!a.contains(key)) fail("not recorded in " + manifest_path().string());
    const auto& e = a.at(key);
    if (!std::filesystem::exists(out_ / e.at("path").get<std::string>())) fail(e.at("path").get<std::string>() + " does not exist");
    const std::string want = stage_hash(stage);
    if (e.at("config_hash") != want) {
      fail("produced with config hash " + e.at("config_hash").get<std::string>() + ", current config hashes to " + want);
    }
  }

  std::vector<std::uint8_t> selected_classes(std::optional<std::uint8_t> only) const {
    const auto all = cfg_.organ_classes();
    if (!only) return all;
    if (std::find(all.begin(), all.end(), *only) == all.end()) {
      throw Error("class " + class_name(*only) + " is not among the configured organ classes");
    }
    return {*only};
  }

 private:
  PipelineConfig cfg_;
  std::filesystem::path out_;
  nlohmann::json manifest_;

  std::filesystem::path manifest_path() const { return out_ / "manifest.json"; }
  static std::string fkey(int f, const std::string& what) { return "fold" + std::to_string(f) + "/" + what; }
  std::string rel(const std::filesystem::path& p) const { return std::filesystem::relative(p, out_).string(); }

  static void write_text(const std::string& path, const std::string& text) {
    write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

  void record(const std::string& key, const std::string& path, const std::string& stage) {
    manifest_["config_hash"] = hex64(fnv1a64(nlohmann::json(cfg_).dump()));
    manifest_["dataset_root"] = data_root().string();
    manifest_["artifacts"][key] = {{"path", path}, {"config_hash", stage_hash(stage)}};
    write_json_file(manifest_path().string(), manifest_);
  }

  void convert_patient(const std::filesystem::path& dir, const std::string& id, std::size_t& written,
                       std::size_t& unchanged) const {
    using namespace pipeline_detail;
    const auto img_path = find_volume(dir, "image");
    const auto lab_path = find_volume(dir, "label");
    if (!img_path || !lab_path) {
      throw FormatError(std::string("unpaired volumes: missing ") + (img_path ? "label" : "image") + ".nii[.gz]");
    }
    const auto img = read_nifti(img_path->string());
    const auto lab = read_nifti(lab_path->string());
    if (img.dims != lab.dims) throw ShapeError("image and label volumes differ in size");
    const auto labels = to_label_volume(lab);
    for (auto l : labels.data) {
      if (l >= kNumClasses) throw FormatError("label value " + std::to_string(l) + " exceeds 10");
    }
    const auto vol = img.to_volume();
    const auto [lo_it, hi_it] = std::minmax_element(vol.data.begin(), vol.data.end());
    const float lo = *lo_it, hi = *hi_it;
    const auto slices = volume_to_slices(vol, cfg_.axis, id);
    const auto masks = volume_to_masks(labels, cfg_.axis);
    const auto base = out_ / "slices";
    auto put = [&](const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
      (write_if_changed(p, b) ? written : unchanged)++;
    };
    for (std::size_t i = 0; i < slices.size(); ++i) {
      put(base / "images" / id / slice_name(i), encode_gray_png(slices[i], lo, hi));
      put(base / "masks" / id / slice_name(i), encode_mask_png(masks[i]));
    }
    const nlohmann::json meta = {{"patient", id},
                                 {"dims", vol.dims},
                                 {"spacing", std::array<double, 3>{img.pixdim[0], img.pixdim[1], img.pixdim[2]}},
                                 {"lo", lo},
                                 {"hi", hi},
                                 {"axis", cfg_.axis},
                                 {"n_slices", slices.size()}};
    const std::string text = meta.dump(2) + "\n";
    put(base / "meta" / (id + ".json"), std::vector<std::uint8_t>(text.begin(), text.end()));
  }

  // Models must never have seen a test patient of the fold.
  static void guard_leakage(const Fold& fd, const std::filesystem::path& meta_path) {
    const auto meta = read_json_file(meta_path.string());
    for (const char* role : {"train", "val"}) {
      for (const auto& p : meta.at(role).get<std::vector<std::string>>()) {
        if (pipeline_detail::contains(fd.test, p)) {
          throw Error("leakage guard: test patient " + p + " was in the " + role + " set of " + meta_path.string());
        }
      }
    }
  }

  MetricsReport summarize(const std::map<std::uint8_t, std::vector<ClassResult>>& by_class, const std::string& fold,
                          const std::string& stage) const {
    std::vector<ClassResult> rs;
    for (const auto& [c, v] : by_class) rs.push_back(pipeline_detail::mean_over_patients(v));
    return aggregate(rs, fold, stage);
  }
};

}  // namespace enteroseg
