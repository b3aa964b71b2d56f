#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "enteroseg/error.hpp"
#include "enteroseg/image.hpp"

namespace enteroseg {

// Boolean membership over a 2D (rank 2, dims[2] == 1) or 3D grid, with
// physical spacing per axis in mm.
struct BinaryMask {
  std::array<std::size_t, 3> dims{0, 0, 1};
  int rank = 2;
  std::vector<std::uint8_t> bits;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  BinaryMask() = default;
  BinaryMask(std::size_t w, std::size_t h, std::vector<std::uint8_t> b, std::array<double, 2> sp = {1.0, 1.0})
      : dims{w, h, 1}, rank(2), bits(std::move(b)), spacing{sp[0], sp[1], 1.0} {
    validate();
  }
  BinaryMask(std::array<std::size_t, 3> d, std::vector<std::uint8_t> b, std::array<double, 3> sp = {1.0, 1.0, 1.0})
      : dims(d), rank(3), bits(std::move(b)), spacing(sp) {
    validate();
  }

  void validate() const {
    if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0) throw ShapeError("mask dimensions must be positive");
    if (bits.size() != dims[0] * dims[1] * dims[2]) throw ShapeError("mask bit count does not match dims");
    for (double s : spacing) {
      if (!(s > 0.0)) throw Error("mask spacing must be positive");
    }
  }

  std::size_t count() const { return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](auto b) { return b != 0; })); }
  bool empty() const { return count() == 0; }
};

inline BinaryMask binary_of(const LabelMask& m, std::uint8_t cls, std::array<double, 2> spacing = {1.0, 1.0}) {
  std::vector<std::uint8_t> b(m.labels.size());
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = m.labels[i] == cls;
  return BinaryMask(m.width, m.height, std::move(b), spacing);
}

inline BinaryMask binary_of(const LabelVolume& v, std::uint8_t cls, std::array<double, 3> spacing = {1.0, 1.0, 1.0}) {
  std::vector<std::uint8_t> b(v.data.size());
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = v.data[i] == cls;
  return BinaryMask(v.dims, std::move(b), spacing);
}

namespace metrics_detail {

struct Counts {
  std::size_t p = 0, g = 0, inter = 0;
};

inline Counts counts(const BinaryMask& p, const BinaryMask& g) {
  if (p.dims != g.dims) throw ShapeError("metric: mask dimensions differ");
  Counts c;
  for (std::size_t i = 0; i < p.bits.size(); ++i) {
    const bool a = p.bits[i] != 0, b = g.bits[i] != 0;
    c.p += a;
    c.g += b;
    c.inter += a && b;
  }
  return c;
}

}  // namespace metrics_detail

// Both empty counts as perfect agreement.
inline double dsc(const BinaryMask& p, const BinaryMask& g) {
  const auto c = metrics_detail::counts(p, g);
  if (c.p + c.g == 0) return 1.0;
  return 2.0 * static_cast<double>(c.inter) / static_cast<double>(c.p + c.g);
}

inline double iou(const BinaryMask& p, const BinaryMask& g) {
  const auto c = metrics_detail::counts(p, g);
  const std::size_t uni = c.p + c.g - c.inter;
  if (uni == 0) return 1.0;
  return static_cast<double>(c.inter) / static_cast<double>(uni);
}

using GridPoint = std::array<std::size_t, 3>;

// Foreground elements with at least one background face neighbour (4 in
// 2D, 6 in 3D); outside the grid counts as background.
inline std::vector<GridPoint> surface_points(const BinaryMask& m) {
  std::vector<GridPoint> out;
  const auto& d = m.dims;
  auto on = [&](long x, long y, long z) {
    if (x < 0 || y < 0 || z < 0 || x >= static_cast<long>(d[0]) || y >= static_cast<long>(d[1]) ||
        z >= static_cast<long>(d[2])) {
      return false;
    }
    return m.bits[static_cast<std::size_t>(x) + d[0] * (static_cast<std::size_t>(y) + d[1] * static_cast<std::size_t>(z))] != 0;
  };
  for (std::size_t z = 0; z < d[2]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[0]; ++x) {
        const long X = static_cast<long>(x), Y = static_cast<long>(y), Z = static_cast<long>(z);
        if (!on(X, Y, Z)) continue;
        bool edge = !on(X - 1, Y, Z) || !on(X + 1, Y, Z) || !on(X, Y - 1, Z) || !on(X, Y + 1, Z);
        if (m.rank == 3) edge = edge || !on(X, Y, Z - 1) || !on(X, Y, Z + 1);
        if (edge) out.push_back({x, y, z});
      }
  return out;
}

// Squared physical distance, summed in axis order x, y, z.
inline double squared_distance(const GridPoint& a, const GridPoint& b, const std::array<double, 3>& sp) {
  double s = 0.0;
  for (int k = 0; k < 3; ++k) {
    const double d = (static_cast<double>(a[k]) - static_cast<double>(b[k])) * sp[k];
    s += d * d;
  }
  return s;
}

// Nearest-rank percentile: the ceil(q * n)-th smallest value (1-based).
inline double nearest_rank(std::vector<double> v, double q) {
  if (v.empty()) throw Error("nearest_rank: empty list");
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size()) - 1e-12));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

namespace metrics_detail {

// Exact squared Euclidean distance transform (lower envelope of
// parabolas, one pass per axis). `f` holds 0 at sites and +inf elsewhere.
inline void edt_1d(std::vector<double>& f, std::size_t n, std::size_t stride, std::size_t offset, double w2,
                   std::vector<double>& buf, std::vector<std::size_t>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  buf.resize(n);
  v.resize(n);
  z.resize(n + 1);
  for (std::size_t i = 0; i < n; ++i) buf[i] = f[offset + i * stride];
  long k = -1;
  for (std::size_t q = 0; q < n; ++q) {
    if (buf[q] == inf) continue;
    const double fq = buf[q] + w2 * static_cast<double>(q) * static_cast<double>(q);
    double s = -inf;
    while (k >= 0) {
      const std::size_t p = v[static_cast<std::size_t>(k)];
      const double fp = buf[p] + w2 * static_cast<double>(p) * static_cast<double>(p);
      s = (fq - fp) / (2.0 * w2 * (static_cast<double>(q) - static_cast<double>(p)));
      if (s <= z[static_cast<std::size_t>(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = k == 0 ? -inf : s;
    z[static_cast<std::size_t>(k) + 1] = inf;
  }
  if (k < 0) return;  // no sites on this line
  std::size_t j = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[j + 1] < static_cast<double>(q)) ++j;
    const double d = (static_cast<double>(q) - static_cast<double>(v[j]));
    f[offset + q * stride] = w2 * d * d + buf[v[j]];
  }
}

// The 1D passes add (dx sx)^2, then (dy sy)^2, then (dz sz)^2, the same
// order squared_distance uses, so on grids where these sums are exact the
// two agree bit for bit.
inline std::vector<double> squared_edt(const std::vector<GridPoint>& sites, const std::array<std::size_t, 3>& d,
                                       const std::array<double, 3>& sp) {
  std::vector<double> f(d[0] * d[1] * d[2], std::numeric_limits<double>::infinity());
  for (const auto& s : sites) f[s[0] + d[0] * (s[1] + d[1] * s[2])] = 0.0;
  std::vector<double> buf, z;
  std::vector<std::size_t> v;
  for (std::size_t zz = 0; zz < d[2]; ++zz)
    for (std::size_t y = 0; y < d[1]; ++y) edt_1d(f, d[0], 1, d[0] * (y + d[1] * zz), sp[0] * sp[0], buf, v, z);
  for (std::size_t zz = 0; zz < d[2]; ++zz)
    for (std::size_t x = 0; x < d[0]; ++x) edt_1d(f, d[1], d[0], x + d[0] * d[1] * zz, sp[1] * sp[1], buf, v, z);
  if (d[2] > 1) {
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[0]; ++x) edt_1d(f, d[2], d[0] * d[1], x + d[0] * y, sp[2] * sp[2], buf, v, z);
  }
  return f;
}

inline std::vector<double> directed_distances(const std::vector<GridPoint>& from, const std::vector<GridPoint>& to,
                                              const std::array<std::size_t, 3>& d, const std::array<double, 3>& sp) {
  const auto edt = squared_edt(to, d, sp);
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& p : from) out.push_back(std::sqrt(edt[p[0] + d[0] * (p[1] + d[1] * p[2])]));
  return out;
}

}  // namespace metrics_detail

// 95th-percentile symmetric surface distance in mm; empty when either mask
// is empty.
inline std::optional<double> hd95(const BinaryMask& p, const BinaryMask& g) {
  if (p.dims != g.dims) throw ShapeError("hd95: mask dimensions differ");
  const auto sp = surface_points(p), sg = surface_points(g);
  if (sp.empty() || sg.empty()) return std::nullopt;
  const auto dpg = metrics_detail::directed_distances(sp, sg, p.dims, p.spacing);
  const auto dgp = metrics_detail::directed_distances(sg, sp, p.dims, p.spacing);
  return std::max(nearest_rank(dpg, 0.95), nearest_rank(dgp, 0.95));
}

// ---------------------------------------------------------------------------
// Per-class evaluation and reports

enum class HdMode { per_slice, volume };

struct ClassResult {
  std::uint8_t class_id = 0;
  double dsc = 1.0, iou = 1.0;
  std::optional<double> hd95;
  std::size_t pred_voxels = 0, gt_voxels = 0;
  bool detection_miss = false;  // ground truth present, prediction empty
};

// DSC and IoU are pooled over the whole volume. HD95 is either the 3D
// value, or the mean of per-slice 2D values over slices (along the coronal
// axis) where both masks are non-empty.
inline ClassResult evaluate_class(const LabelVolume& pred, const LabelVolume& gt, std::uint8_t cls,
                                  const std::array<double, 3>& spacing, HdMode mode = HdMode::per_slice) {
  if (pred.dims != gt.dims) throw ShapeError("evaluate_class: prediction and ground truth differ in size");
  ClassResult r;
  r.class_id = cls;
  const auto p = binary_of(pred, cls, spacing), g = binary_of(gt, cls, spacing);
  r.dsc = dsc(p, g);
  r.iou = iou(p, g);
  r.pred_voxels = p.count();
  r.gt_voxels = g.count();
  r.detection_miss = r.gt_voxels > 0 && r.pred_voxels == 0;
  if (mode == HdMode::volume) {
    r.hd95 = hd95(p, g);
    return r;
  }
  const auto [ca, ra] = plane_axes(kCoronalAxis);
  const std::array<double, 2> sp2{spacing[ca], spacing[ra]};
  const auto ps = volume_to_masks(pred), gs = volume_to_masks(gt);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t s = 0; s < ps.size(); ++s) {
    const auto h = hd95(binary_of(ps[s], cls, sp2), binary_of(gs[s], cls, sp2));
    if (h) {
      total += *h;
      ++n;
    }
  }
  if (n > 0) r.hd95 = total / static_cast<double>(n);
  return r;
}

struct MetricsReport {
  std::string fold, stage;
  std::vector<ClassResult> classes;
  double mdsc = 0.0, miou = 0.0;
  std::optional<double> mhd95;
  std::size_t hd95_undefined = 0;
};

inline MetricsReport aggregate(std::vector<ClassResult> results, const std::string& fold = {},
                               const std::string& stage = {}) {
  if (results.empty()) throw Error("aggregate: no class results");
  MetricsReport r;
  r.fold = fold;
  r.stage = stage;
  double hd = 0.0;
  std::size_t nhd = 0;
  for (const auto& c : results) {
    r.mdsc += c.dsc;
    r.miou += c.iou;
    if (c.hd95) {
      hd += *c.hd95;
      ++nhd;
    } else {
      ++r.hd95_undefined;
    }
  }
  r.mdsc /= static_cast<double>(results.size());
  r.miou /= static_cast<double>(results.size());
  if (nhd > 0) r.mhd95 = hd / static_cast<double>(nhd);
  r.classes = std::move(results);
  return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j;
  j["fold"] = r.fold;
  j["stage"] = r.stage;
  j["mDSC"] = r.mdsc;
  j["mIoU"] = r.miou;
  j["mHD95"] = opt(r.mhd95);
  j["hd95_undefined"] = r.hd95_undefined;
  j["classes"] = nlohmann::json::array();
  for (const auto& c : r.classes) {
    j["classes"].push_back({{"class", class_name(c.class_id)},
                            {"class_id", c.class_id},
                            {"dsc", c.dsc},
                            {"iou", c.iou},
                            {"hd95", opt(c.hd95)},
                            {"pred_voxels", c.pred_voxels},
                            {"gt_voxels", c.gt_voxels},
                            {"detection_miss", c.detection_miss}});
  }
  return j;
}

// Aligned table; with a baseline, per-metric deltas (this - baseline) are
// appended for classes present in both.
inline std::string format_table(const MetricsReport& r, const MetricsReport* baseline = nullptr) {
  std::ostringstream os;
  auto hd = [](const std::optional<double>& v) {
    std::ostringstream s;
    if (v) {
      s << std::fixed << std::setprecision(2) << *v;
    } else {
      s << "--";
    }
    return s.str();
  };
  auto find = [&](std::uint8_t c) -> const ClassResult* {
    if (!baseline) return nullptr;
    for (const auto& b : baseline->classes)
      if (b.class_id == c) return &b;
    return nullptr;
  };
  os << std::left << std::setw(18) << "class" << std::right << std::setw(9) << "DSC" << std::setw(9) << "IoU"
     << std::setw(10) << "HD95";
  if (baseline) os << std::setw(10) << "dDSC" << std::setw(10) << "dIoU" << std::setw(10) << "dHD95";
  os << "\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& c : r.classes) {
    os << std::left << std::setw(18) << class_name(c.class_id) << std::right << std::setw(9) << c.dsc << std::setw(9)
       << c.iou << std::setw(10) << hd(c.hd95);
    if (const auto* b = find(c.class_id)) {
      os << std::showpos << std::setw(10) << c.dsc - b->dsc << std::setw(10) << c.iou - b->iou << std::noshowpos;
      os << std::setw(10) << (c.hd95 && b->hd95 ? hd(*c.hd95 - *b->hd95) : std::string("--"));
    }
    os << "\n";
  }
  os << std::left << std::setw(18) << "mean" << std::right << std::setw(9) << r.mdsc << std::setw(9) << r.miou
     << std::setw(10) << hd(r.mhd95) << "\n";
  return os.str();
}

}  // namespace enteroseg
