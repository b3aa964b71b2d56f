#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "enteroseg/checkpoint.hpp"
#include "enteroseg/dataset.hpp"
#include "enteroseg/error.hpp"
#include "enteroseg/image.hpp"
#include "enteroseg/png.hpp"

namespace enteroseg {

inline constexpr std::size_t kDefaultRoiPad = 40;
inline constexpr std::size_t kDefaultRoiSize = 96;

// Inverse of volume_to_masks: slice s becomes plane s along `axis`.
inline LabelVolume stack_predictions(const std::vector<LabelMask>& slices, int axis = kCoronalAxis) {
  if (slices.empty()) throw Error("stack_predictions: no slices");
  LabelVolume vol(stacked_dims(slices[0].width, slices[0].height, slices.size(), axis));
  for (std::size_t i = 0; i < slices.size(); ++i) {
    if (slices[i].width != slices[0].width || slices[i].height != slices[0].height ||
        slices[i].labels.size() != slices[0].width * slices[0].height) {
      throw ShapeError("stack_predictions: slice " + std::to_string(i) + " has different dimensions");
    }
    insert_plane(vol, axis, i, slices[i].labels);
  }
  return vol;
}

// Inclusive voxel bounds per axis.
struct BBox3D {
  std::array<std::size_t, 3> lo{0, 0, 0}, hi{0, 0, 0};

  std::size_t extent(int axis) const { return hi[axis] - lo[axis] + 1; }
  bool contains(std::size_t x, std::size_t y, std::size_t z) const {
    return x >= lo[0] && x <= hi[0] && y >= lo[1] && y <= hi[1] && z >= lo[2] && z <= hi[2];
  }
  bool operator==(const BBox3D&) const = default;
};

inline std::optional<BBox3D> class_bbox(const LabelVolume& vol, std::uint8_t cls) {
  std::optional<BBox3D> box;
  for (std::size_t z = 0; z < vol.dims[2]; ++z)
    for (std::size_t y = 0; y < vol.dims[1]; ++y)
      for (std::size_t x = 0; x < vol.dims[0]; ++x) {
        if (vol.at(x, y, z) != cls) continue;
        const std::array<std::size_t, 3> p{x, y, z};
        if (!box) {
          box = BBox3D{p, p};
          continue;
        }
        for (int a = 0; a < 3; ++a) {
          box->lo[a] = std::min(box->lo[a], p[a]);
          box->hi[a] = std::max(box->hi[a], p[a]);
        }
      }
  return box;
}

// Grows every face by `pad` voxels and clamps to [0, dim - 1].
inline BBox3D pad_bbox(const BBox3D& b, std::size_t pad, const std::array<std::size_t, 3>& dims) {
  BBox3D out;
  for (int a = 0; a < 3; ++a) {
    if (b.lo[a] > b.hi[a] || b.hi[a] >= dims[a]) throw Error("pad_bbox: box outside volume bounds");
    out.lo[a] = b.lo[a] > pad ? b.lo[a] - pad : 0;
    out.hi[a] = std::min(b.hi[a] + pad, dims[a] - 1);
  }
  return out;
}

template <typename V>
Volume<V> crop(const Volume<V>& vol, const BBox3D& b) {
  for (int a = 0; a < 3; ++a) {
    if (b.lo[a] > b.hi[a] || b.hi[a] >= vol.dims[a]) throw Error("crop: box outside volume bounds");
  }
  Volume<V> out({b.extent(0), b.extent(1), b.extent(2)});
  for (std::size_t z = 0; z < out.dims[2]; ++z)
    for (std::size_t y = 0; y < out.dims[1]; ++y)
      for (std::size_t x = 0; x < out.dims[0]; ++x) out.at(x, y, z) = vol.at(b.lo[0] + x, b.lo[1] + y, b.lo[2] + z);
  return out;
}

struct RoiPatchSet {
  std::uint8_t class_id = 0;
  std::string patient;
  BBox3D bbox;  // padded box the patches were cut from
  std::size_t pad = kDefaultRoiPad;
  std::size_t target_width = kDefaultRoiSize, target_height = kDefaultRoiSize;
  int axis = kCoronalAxis;
  std::vector<GrayscaleSlice> images;  // normalized, resized
  std::vector<LabelMask> masks;        // binary 0/1, resized nearest

  std::size_t size() const { return images.size(); }
};

// Crop both volumes to `box`, binarize the labels to (label == cls), slice
// along `axis`, normalize each intensity patch and resize to the target.
inline RoiPatchSet extract_roi(const FloatVolume& image, const LabelVolume& labels, const BBox3D& box,
                               std::uint8_t cls, std::size_t target_w = kDefaultRoiSize,
                               std::size_t target_h = kDefaultRoiSize, int axis = kCoronalAxis) {
  if (image.dims != labels.dims) throw ShapeError("extract_roi: intensity and label volumes differ in size");
  RoiPatchSet set;
  set.class_id = cls;
  set.bbox = box;
  set.target_width = target_w;
  set.target_height = target_h;
  set.axis = axis;
  const auto img = crop(image, box);
  auto lab = crop(labels, box);
  for (auto& v : lab.data) v = v == cls ? 1 : 0;
  const auto slices = volume_to_slices(img, axis);
  const auto masks = volume_to_masks(lab, axis);
  for (std::size_t i = 0; i < slices.size(); ++i) {
    GrayscaleSlice s = normalize_slice(slices[i]);
    s.provenance.index = box.lo[axis] + i;
    set.images.push_back(resize(s, target_w, target_h, Interp::bilinear));
    set.masks.push_back(resize(masks[i], target_w, target_h, Interp::nearest));
  }
  return set;
}

// Writes per-patch probabilities (target resolution, one vector per patch)
// back into a full-size probability volume: each patch is resized to the
// crop's in-plane size and pasted at the box position. Outside the box the
// volume is 0.
inline FloatVolume map_back(const std::vector<std::vector<float>>& patch_probs, const RoiPatchSet& set,
                            const std::array<std::size_t, 3>& dims) {
  const int axis = set.axis;
  const auto [ca, ra] = plane_axes(axis);
  if (patch_probs.size() != set.bbox.extent(axis)) {
    throw ShapeError("map_back: " + std::to_string(patch_probs.size()) + " patches for a box " +
                     std::to_string(set.bbox.extent(axis)) + " slices deep");
  }
  FloatVolume out(dims, 0.0f);
  const std::size_t cw = set.bbox.extent(ca), chh = set.bbox.extent(ra);
  for (std::size_t i = 0; i < patch_probs.size(); ++i) {
    if (patch_probs[i].size() != set.target_width * set.target_height) throw ShapeError("map_back: patch size");
    GrayscaleSlice p;
    p.width = set.target_width;
    p.height = set.target_height;
    p.pixels = patch_probs[i];
    const auto r = resize(p, cw, chh, Interp::bilinear);
    std::array<std::size_t, 3> c{};
    c[axis] = set.bbox.lo[axis] + i;
    for (std::size_t row = 0; row < chh; ++row) {
      c[ra] = set.bbox.lo[ra] + row;
      for (std::size_t col = 0; col < cw; ++col) {
        c[ca] = set.bbox.lo[ca] + col;
        out.at(c[0], c[1], c[2]) = r.pixels[row * cw + col];
      }
    }
  }
  return out;
}

// Multiclass fusion of per-organ probability volumes: a voxel takes the
// organ with the highest probability above `threshold`, else background.
inline LabelVolume fuse_organ_probabilities(const std::vector<std::pair<std::uint8_t, FloatVolume>>& organs,
                                            const std::array<std::size_t, 3>& dims, float threshold = 0.5f) {
  LabelVolume out(dims, 0);
  std::vector<float> best(out.size(), threshold);
  for (const auto& [cls, prob] : organs) {
    if (prob.dims != dims) throw ShapeError("fuse_organ_probabilities: volume size mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (prob.data[i] > best[i]) {
        best[i] = prob.data[i];
        out.data[i] = cls;
      }
    }
  }
  return out;
}

inline nlohmann::json to_json(const BBox3D& b) { return {{"lo", b.lo}, {"hi", b.hi}}; }

inline BBox3D bbox_from_json(const nlohmann::json& j) {
  return BBox3D{j.at("lo").get<std::array<std::size_t, 3>>(), j.at("hi").get<std::array<std::size_t, 3>>()};
}

// Paired PNG patches plus a manifest recording the crop. Intensity patches
// are quantized over each patch's own [min, max], which the manifest keeps
// so values can be mapped back.
inline void save_roi_patch_set(const std::string& dir, const RoiPatchSet& set) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json m;
  m["version"] = 1;
  m["class"] = class_name(set.class_id);
  m["class_id"] = set.class_id;
  m["patient"] = set.patient;
  m["bbox"] = to_json(set.bbox);
  m["pad"] = set.pad;
  m["axis"] = set.axis;
  m["target"] = {set.target_width, set.target_height};
  m["patches"] = nlohmann::json::array();
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& img = set.images[i];
    const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
    char stem[32];
    std::snprintf(stem, sizeof stem, "%04zu", i);
    const std::string iname = std::string("image_") + stem + ".png", mname = std::string("mask_") + stem + ".png";
    write_file_bytes((fs::path(dir) / iname).string(), encode_gray_png(img, *lo, *hi));
    write_file_bytes((fs::path(dir) / mname).string(), encode_mask_png(set.masks[i]));
    m["patches"].push_back({{"slice", img.provenance.index}, {"image", iname}, {"mask", mname},
                            {"min", *lo}, {"max", *hi}});
  }
  write_json_file((fs::path(dir) / "manifest.json").string(), m);
}

// Inverse of save_roi_patch_set. Intensities come back quantized to the
// 8-bit grid of each patch's [min, max].
inline RoiPatchSet load_roi_patch_set(const std::string& dir) {
  namespace fs = std::filesystem;
  const auto m = read_json_file((fs::path(dir) / "manifest.json").string());
  if (m.value("version", 0) != 1) throw FormatError("roi manifest in " + dir + ": unsupported version");
  RoiPatchSet set;
  set.class_id = m.at("class_id").get<std::uint8_t>();
  set.patient = m.at("patient").get<std::string>();
  set.bbox = bbox_from_json(m.at("bbox"));
  set.pad = m.at("pad").get<std::size_t>();
  set.axis = m.at("axis").get<int>();
  set.target_width = m.at("target").at(0).get<std::size_t>();
  set.target_height = m.at("target").at(1).get<std::size_t>();
  for (const auto& p : m.at("patches")) {
    GrayscaleSlice img = decode_gray_png(read_file_bytes((fs::path(dir) / p.at("image").get<std::string>()).string()));
    const float lo = p.at("min").get<float>(), hi = p.at("max").get<float>();
    const float span = hi > lo ? hi - lo : 1.0f;
    for (auto& v : img.pixels) v = hi > lo ? lo + v / 255.0f * span : lo;
    img.normalized = true;
    img.provenance = {set.patient, p.at("slice").get<std::size_t>(), set.axis};
    auto mask = decode_mask_png(read_file_bytes((fs::path(dir) / p.at("mask").get<std::string>()).string()));
    if (img.width != set.target_width || img.height != set.target_height || mask.width != img.width ||
        mask.height != img.height) {
      throw FormatError("roi patch " + p.at("image").get<std::string>() + " in " + dir + " has unexpected size");
    }
    set.images.push_back(std::move(img));
    set.masks.push_back(std::move(mask));
  }
  if (set.images.size() != set.bbox.extent(set.axis)) {
    throw FormatError("roi manifest in " + dir + " lists " + std::to_string(set.images.size()) +
                      " patches for a box " + std::to_string(set.bbox.extent(set.axis)) + " slices deep");
  }
  return set;
}

}  // namespace enteroseg
