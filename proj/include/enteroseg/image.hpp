#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "enteroseg/error.hpp"
#include "enteroseg/nn_ops.hpp"

namespace enteroseg {

// Class index 0 is background; 1..10 are the organs in this fixed order.
inline constexpr std::size_t kNumOrgans = 10;
inline constexpr std::size_t kNumClasses = kNumOrgans + 1;
inline constexpr std::uint8_t kAppendix = 4;

inline constexpr std::array<std::string_view, kNumClasses> kClassNames = {
    "background",      "stomach",         "duodenum",         "small_intestine",
    "appendix",        "cecum",           "ascending_colon",  "transverse_colon",
    "descending_colon", "sigmoid_colon",  "rectum"};

inline std::string class_name(std::size_t c) {
  return c < kClassNames.size() ? std::string(kClassNames[c]) : "class_" + std::to_string(c);
}

// Accepts either a class name or its numeric index.
inline std::size_t class_index(std::string_view name) {
  for (std::size_t i = 0; i < kClassNames.size(); ++i) {
    if (kClassNames[i] == name) return i;
  }
  std::size_t v = 0;
  for (char ch : name) {
    if (ch < '0' || ch > '9') throw Error("unknown class name: " + std::string(name));
    v = v * 10 + static_cast<std::size_t>(ch - '0');
  }
  if (name.empty() || v >= kNumClasses) throw Error("class index out of range: " + std::string(name));
  return v;
}

// Dense 3D array in x-fastest order: index = x + nx * (y + ny * z).
template <typename V>
struct Volume {
  std::array<std::size_t, 3> dims{0, 0, 0};
  std::vector<V> data;

  Volume() = default;
  Volume(std::array<std::size_t, 3> d, V fill = V{}) : dims(d), data(d[0] * d[1] * d[2], fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return x + dims[0] * (y + dims[1] * z);
  }
  V& at(std::size_t x, std::size_t y, std::size_t z) { return data[index(x, y, z)]; }
  const V& at(std::size_t x, std::size_t y, std::size_t z) const { return data[index(x, y, z)]; }
  bool operator==(const Volume&) const = default;
};

using FloatVolume = Volume<float>;
using LabelVolume = Volume<std::uint8_t>;

struct SliceProvenance {
  std::string patient;
  std::size_t index = 0;
  int axis = 1;
};

struct GrayscaleSlice {
  std::size_t width = 0, height = 0;
  std::vector<float> pixels;  // row-major
  bool normalized = false;
  SliceProvenance provenance;

  float at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
};

struct LabelMask {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> labels;  // row-major, values 0..=10

  std::uint8_t at(std::size_t x, std::size_t y) const { return labels[y * width + x]; }
  bool operator==(const LabelMask&) const = default;
};

inline std::set<std::uint8_t> label_set(const LabelMask& m) {
  return std::set<std::uint8_t>(m.labels.begin(), m.labels.end());
}

// The coronal convention: slices run along array axis 1, and voxel (x,y,z)
// lands at slice[y] pixel (x,z). For a general axis the two remaining axes
// become (column, row) in increasing axis order.
inline constexpr int kCoronalAxis = 1;

struct PlaneAxes {
  int col, row;
};

inline PlaneAxes plane_axes(int axis) {
  switch (axis) {
    case 0: return {1, 2};
    case 1: return {0, 2};
    case 2: return {0, 1};
    default: throw Error("slice axis must be 0, 1 or 2, got " + std::to_string(axis));
  }
}

template <typename V>
std::vector<V> extract_plane(const Volume<V>& vol, int axis, std::size_t index,
                             std::size_t& width, std::size_t& height) {
  const auto [ca, ra] = plane_axes(axis);
  width = vol.dims[ca];
  height = vol.dims[ra];
  std::vector<V> out(width * height);
  std::array<std::size_t, 3> c{};
  c[axis] = index;
  for (std::size_t r = 0; r < height; ++r) {
    c[ra] = r;
    for (std::size_t q = 0; q < width; ++q) {
      c[ca] = q;
      out[r * width + q] = vol.at(c[0], c[1], c[2]);
    }
  }
  return out;
}

template <typename V>
void insert_plane(Volume<V>& vol, int axis, std::size_t index, const std::vector<V>& plane) {
  const auto [ca, ra] = plane_axes(axis);
  const std::size_t width = vol.dims[ca];
  std::array<std::size_t, 3> c{};
  c[axis] = index;
  for (std::size_t r = 0; r < vol.dims[ra]; ++r) {
    c[ra] = r;
    for (std::size_t q = 0; q < width; ++q) {
      c[ca] = q;
      vol.at(c[0], c[1], c[2]) = plane[r * width + q];
    }
  }
}

inline std::vector<GrayscaleSlice> volume_to_slices(const FloatVolume& vol, int axis = kCoronalAxis,
                                                    const std::string& patient = {}) {
  plane_axes(axis);
  std::vector<GrayscaleSlice> out;
  for (std::size_t i = 0; i < vol.dims[axis]; ++i) {
    GrayscaleSlice s;
    s.pixels = extract_plane(vol, axis, i, s.width, s.height);
    s.provenance = {patient, i, axis};
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<LabelMask> volume_to_masks(const LabelVolume& vol, int axis = kCoronalAxis) {
  plane_axes(axis);
  std::vector<LabelMask> out;
  for (std::size_t i = 0; i < vol.dims[axis]; ++i) {
    LabelMask m;
    m.labels = extract_plane(vol, axis, i, m.width, m.height);
    out.push_back(std::move(m));
  }
  return out;
}

inline std::array<std::size_t, 3> stacked_dims(std::size_t width, std::size_t height, std::size_t count,
                                               int axis) {
  const auto [ca, ra] = plane_axes(axis);
  std::array<std::size_t, 3> d{};
  d[ca] = width;
  d[ra] = height;
  d[axis] = count;
  return d;
}

inline FloatVolume stack_slices(const std::vector<GrayscaleSlice>& slices, int axis = kCoronalAxis) {
  if (slices.empty()) throw Error("stack_slices: no slices");
  FloatVolume vol(stacked_dims(slices[0].width, slices[0].height, slices.size(), axis));
  for (std::size_t i = 0; i < slices.size(); ++i) {
    if (slices[i].width != slices[0].width || slices[i].height != slices[0].height) {
      throw ShapeError("stack_slices: slice " + std::to_string(i) + " has different dimensions");
    }
    insert_plane(vol, axis, i, slices[i].pixels);
  }
  return vol;
}

// Per-slice standardization with population statistics. Constant slices
// become all zeros.
inline GrayscaleSlice normalize_slice(const GrayscaleSlice& s) {
  GrayscaleSlice out = s;
  const std::size_t n = s.pixels.size();
  if (n == 0) return out;
  double mean = 0.0;
  for (float p : s.pixels) mean += p;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (float p : s.pixels) var += (p - mean) * (p - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  const double denom = std::max(sd, 1e-8);
  for (std::size_t i = 0; i < n; ++i) {
    out.pixels[i] = sd < 1e-8 ? 0.0f : static_cast<float>((s.pixels[i] - mean) / denom);
  }
  out.normalized = true;
  return out;
}

enum class Interp { bilinear, nearest };

namespace detail {

// Nearest source index under the half-pixel convention.
inline std::vector<std::size_t> nearest_taps(std::size_t in, std::size_t out) {
  std::vector<std::size_t> taps(out);
  for (std::size_t d = 0; d < out; ++d) {
    const std::size_t s = (2 * d + 1) * in / (2 * out);
    taps[d] = std::min(s, in - 1);
  }
  return taps;
}

template <typename V>
std::vector<V> resize_nearest(const std::vector<V>& src, std::size_t sw, std::size_t sh,
                              std::size_t dw, std::size_t dh) {
  const auto tx = nearest_taps(sw, dw), ty = nearest_taps(sh, dh);
  std::vector<V> out(dw * dh);
  for (std::size_t y = 0; y < dh; ++y)
    for (std::size_t x = 0; x < dw; ++x) out[y * dw + x] = src[ty[y] * sw + tx[x]];
  return out;
}

inline std::vector<float> resize_bilinear(const std::vector<float>& src, std::size_t sw,
                                          std::size_t sh, std::size_t dw, std::size_t dh) {
  const auto tx = bilinear_taps(sw, dw), ty = bilinear_taps(sh, dh);
  std::vector<float> out(dw * dh);
  for (std::size_t y = 0; y < dh; ++y) {
    const double fy = ty[y].frac;
    for (std::size_t x = 0; x < dw; ++x) {
      const double fx = tx[x].frac;
      const double top = src[ty[y].i0 * sw + tx[x].i0] * (1 - fx) + src[ty[y].i0 * sw + tx[x].i1] * fx;
      const double bot = src[ty[y].i1 * sw + tx[x].i0] * (1 - fx) + src[ty[y].i1 * sw + tx[x].i1] * fx;
      out[y * dw + x] = static_cast<float>(top * (1 - fy) + bot * fy);
    }
  }
  return out;
}

}  // namespace detail

inline GrayscaleSlice resize(const GrayscaleSlice& s, std::size_t width, std::size_t height,
                             Interp interp = Interp::bilinear) {
  if (width == 0 || height == 0) throw ShapeError("resize: target extents must be >= 1");
  GrayscaleSlice out = s;
  out.width = width;
  out.height = height;
  out.pixels = interp == Interp::bilinear
                   ? detail::resize_bilinear(s.pixels, s.width, s.height, width, height)
                   : detail::resize_nearest(s.pixels, s.width, s.height, width, height);
  return out;
}

// Label masks only support nearest-neighbour: interpolating class indices
// would produce labels that do not exist in the source.
inline LabelMask resize(const LabelMask& m, std::size_t width, std::size_t height,
                        Interp interp = Interp::nearest) {
  if (interp != Interp::nearest) throw Error("resize: bilinear interpolation of a label mask");
  if (width == 0 || height == 0) throw ShapeError("resize: target extents must be >= 1");
  LabelMask out;
  out.width = width;
  out.height = height;
  out.labels = detail::resize_nearest(m.labels, m.width, m.height, width, height);
  return out;
}

}  // namespace enteroseg
