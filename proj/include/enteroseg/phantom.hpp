#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <future>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "enteroseg/dataset.hpp"
#include "enteroseg/error.hpp"
#include "enteroseg/image.hpp"
#include "enteroseg/nifti.hpp"
#include "enteroseg/rng.hpp"

namespace enteroseg {

// Synthetic abdomen stand-in: a soft-tissue body ellipsoid holding one
// blob or tube per organ class, plus an optional tiny "rare" organ that is
// present only in a fraction of patients.
enum class ShapeKind { ellipsoid, tube };

struct OrganShape {
  ShapeKind kind = ShapeKind::ellipsoid;
  double size_min = 0.12, size_max = 0.2;  // radius as a fraction of each dim
  double intensity_min = 0.4, intensity_max = 0.5;
};

struct PhantomSpec {
  std::array<std::size_t, 3> dims{64, 24, 64};
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
  std::size_t n_classes = 3;  // organ classes, ids 1..n
  std::vector<OrganShape> shapes;  // one per class; empty = built-in defaults
  std::size_t rare_class = 0;      // 0 = no rare class
  double rare_prevalence = 1.0;    // fraction of patients containing it
  std::size_t rare_radius = 2;     // voxels, per axis
  double noise = 0.05;
  double body_intensity = 0.2;
  std::size_t n_patients = 10;
  std::uint64_t seed = 0;

  std::vector<OrganShape> resolved_shapes() const {
    if (!shapes.empty()) return shapes;
    std::vector<OrganShape> out;
    for (std::size_t c = 0; c < n_classes; ++c) {
      OrganShape s;
      s.kind = c % 2 == 0 ? ShapeKind::ellipsoid : ShapeKind::tube;
      s.size_min = c % 2 == 0 ? 0.12 : 0.06;
      s.size_max = c % 2 == 0 ? 0.2 : 0.09;
      s.intensity_min = 0.45 + 0.3 * static_cast<double>(c);
      s.intensity_max = s.intensity_min + 0.1;
      out.push_back(s);
    }
    return out;
  }

  // Upper bound on rare-class voxels: its bounding cube.
  std::size_t rare_voxel_bound() const {
    const std::size_t side = 2 * rare_radius + 1;
    return side * side * side;
  }

  void validate() const {
    if (n_classes < 1 || n_classes > kNumOrgans) throw Error("phantom: n_classes must be in [1, 10]");
    if (!shapes.empty() && shapes.size() != n_classes) throw Error("phantom: shapes must list one entry per class");
    for (auto d : dims) {
      if (d < 8) throw Error("phantom: every dimension must be >= 8");
    }
    if (n_patients < 1) throw Error("phantom: n_patients must be >= 1");
    if (rare_class > n_classes) throw Error("phantom: rare_class must be 0 or a class id");
    if (!(rare_prevalence >= 0.0 && rare_prevalence <= 1.0)) throw Error("phantom: rare_prevalence outside [0, 1]");
    if (rare_class && static_cast<double>(rare_voxel_bound()) >= 0.005 * static_cast<double>(dims[0] * dims[1] * dims[2])) {
      throw Error("phantom: rare_radius too large to stay under 0.5% of the volume");
    }
    if (noise < 0.0) throw Error("phantom: noise must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const OrganShape& s) {
  j = {{"kind", s.kind == ShapeKind::ellipsoid ? "ellipsoid" : "tube"},
       {"size", {s.size_min, s.size_max}},
       {"intensity", {s.intensity_min, s.intensity_max}}};
}

inline void from_json(const nlohmann::json& j, OrganShape& s) {
  const auto kind = j.value("kind", std::string("ellipsoid"));
  if (kind != "ellipsoid" && kind != "tube") throw Error("phantom: unknown shape kind " + kind);
  s.kind = kind == "tube" ? ShapeKind::tube : ShapeKind::ellipsoid;
  if (j.contains("size")) {
    s.size_min = j.at("size").at(0);
    s.size_max = j.at("size").at(1);
  }
  if (j.contains("intensity")) {
    s.intensity_min = j.at("intensity").at(0);
    s.intensity_max = j.at("intensity").at(1);
  }
}

inline void to_json(nlohmann::json& j, const PhantomSpec& p) {
  j = {{"dims", p.dims},          {"spacing", p.spacing},
       {"n_classes", p.n_classes}, {"shapes", p.shapes},
       {"rare_class", p.rare_class}, {"rare_prevalence", p.rare_prevalence},
       {"rare_radius", p.rare_radius}, {"noise", p.noise},
       {"body_intensity", p.body_intensity}, {"n_patients", p.n_patients},
       {"seed", p.seed}};
}

inline void from_json(const nlohmann::json& j, PhantomSpec& p) {
  p.dims = j.value("dims", p.dims);
  p.spacing = j.value("spacing", p.spacing);
  p.n_classes = j.value("n_classes", p.n_classes);
  if (j.contains("shapes")) p.shapes = j.at("shapes").get<std::vector<OrganShape>>();
  p.rare_class = j.value("rare_class", p.rare_class);
  p.rare_prevalence = j.value("rare_prevalence", p.rare_prevalence);
  p.rare_radius = j.value("rare_radius", p.rare_radius);
  p.noise = j.value("noise", p.noise);
  p.body_intensity = j.value("body_intensity", p.body_intensity);
  p.n_patients = j.value("n_patients", p.n_patients);
  p.seed = j.value("seed", p.seed);
}

struct Phantom {
  std::string patient;
  FloatVolume image;
  LabelVolume labels;
  bool has_rare = false;

  std::vector<std::size_t> class_counts(std::size_t n_labels) const {
    std::vector<std::size_t> c(n_labels, 0);
    for (auto l : labels.data) ++c.at(l);
    return c;
  }
};

inline std::string phantom_patient_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "P%03zu", i);
  return buf;
}

namespace phantom_detail {

struct Painter {
  FloatVolume& img;
  LabelVolume& lab;

  template <typename Inside>
  void fill(const Inside& inside, std::uint8_t cls, float value) {
    const auto& d = img.dims;
    for (std::size_t z = 0; z < d[2]; ++z)
      for (std::size_t y = 0; y < d[1]; ++y)
        for (std::size_t x = 0; x < d[0]; ++x) {
          if (!inside(x + 0.5, y + 0.5, z + 0.5)) continue;
          img.at(x, y, z) = value;
          lab.at(x, y, z) = cls;
        }
  }
};

}  // namespace phantom_detail

// Patient i depends only on (seed, i), so any subset can be regenerated.
inline Phantom generate_phantom(const PhantomSpec& spec, std::size_t i) {
  spec.validate();
  Rng rng = Rng(spec.seed).split(i);
  const auto& d = spec.dims;
  const double dx = static_cast<double>(d[0]), dy = static_cast<double>(d[1]), dz = static_cast<double>(d[2]);
  Phantom ph;
  ph.patient = phantom_patient_id(i);
  ph.image = FloatVolume(d, 0.0f);
  ph.labels = LabelVolume(d, 0);
  phantom_detail::Painter paint{ph.image, ph.labels};

  // body: fills most of the field, label 0
  paint.fill([&](double x, double y, double z) {
    const double u = (x - dx / 2) / (0.46 * dx), v = (y - dy / 2) / (0.48 * dy), w = (z - dz / 2) / (0.46 * dz);
    return u * u + v * v + w * w <= 1.0;
  }, 0, static_cast<float>(spec.body_intensity));

  const auto shapes = spec.resolved_shapes();
  for (std::size_t c = 1; c <= spec.n_classes; ++c) {
    const auto& s = shapes[c - 1];
    const float value = static_cast<float>(rng.uniform(s.intensity_min, s.intensity_max));
    const double r = rng.uniform(s.size_min, s.size_max);
    const double cx = rng.uniform(0.3, 0.7) * dx, cy = rng.uniform(0.35, 0.65) * dy, cz = rng.uniform(0.3, 0.7) * dz;
    // the rare organ gets its own tiny blob below
    if (c == spec.rare_class) {
      ph.has_rare = rng.uniform() < spec.rare_prevalence;
      if (!ph.has_rare) continue;
      const double rr = static_cast<double>(spec.rare_radius) + 0.5;
      // centred on a voxel so radius 0 still marks one voxel
      const double ex = std::floor(rng.uniform(0.3, 0.7) * dx) + 0.5, ey = std::floor(rng.uniform(0.3, 0.7) * dy) + 0.5,
                   ez = std::floor(rng.uniform(0.3, 0.7) * dz) + 0.5;
      paint.fill([&](double x, double y, double z) {
        const double u = (x - ex) / rr, v = (y - ey) / rr, w = (z - ez) / rr;
        return u * u + v * v + w * w <= 1.0;
      }, static_cast<std::uint8_t>(c), value);
      continue;
    }
    if (s.kind == ShapeKind::ellipsoid) {
      const double ax = r * dx, ay = r * dy * rng.uniform(0.8, 1.4), az = r * dz * rng.uniform(0.8, 1.2);
      paint.fill([&](double x, double y, double z) {
        const double u = (x - cx) / ax, v = (y - cy) / ay, w = (z - cz) / az;
        return u * u + v * v + w * w <= 1.0;
      }, static_cast<std::uint8_t>(c), value);
    } else {
      // bowel-like tube: runs along x, meandering sinusoidally in z
      const double rad = r * std::min(dz, dx), amp = rng.uniform(0.05, 0.15) * dz;
      const double freq = rng.uniform(1.0, 2.0) * 2.0 * 3.14159265358979 / dx, phase = rng.uniform(0.0, 6.283);
      const double ry = std::max(rad, r * dy);
      paint.fill([&](double x, double y, double z) {
        if (x < 0.15 * dx || x > 0.85 * dx) return false;
        const double zc = cz + amp * std::sin(freq * x + phase);
        const double v = (y - cy) / ry, w = (z - zc) / rad;
        return v * v + w * w <= 1.0;
      }, static_cast<std::uint8_t>(c), value);
    }
  }
  for (auto& v : ph.image.data) v += static_cast<float>(spec.noise * rng.normal());
  return ph;
}

// Writes <dir>/<patient>/image.nii.gz and label.nii.gz for every patient,
// plus <dir>/stats.json with per-class voxel counts.
inline nlohmann::json write_phantom_dataset(const PhantomSpec& spec, const std::string& dir) {
  namespace fs = std::filesystem;
  spec.validate();
  std::vector<std::future<nlohmann::json>> jobs;
  for (std::size_t i = 0; i < spec.n_patients; ++i) {
    jobs.push_back(std::async(std::launch::async, [&spec, &dir, i] {
      const auto ph = generate_phantom(spec, i);
      const fs::path pdir = fs::path(dir) / ph.patient;
      fs::create_directories(pdir);
      write_nifti((pdir / "image.nii.gz").string(), ph.image.dims, ph.image.data, NiftiDatatype::float32,
                  spec.spacing);
      std::vector<float> lab(ph.labels.data.begin(), ph.labels.data.end());
      write_nifti((pdir / "label.nii.gz").string(), ph.labels.dims, lab, NiftiDatatype::uint8, spec.spacing);
      return nlohmann::json{{"patient", ph.patient},
                            {"class_counts", ph.class_counts(spec.n_classes + 1)},
                            {"has_rare", ph.has_rare}};
    }));
  }
  nlohmann::json stats;
  stats["version"] = 1;
  stats["seed"] = spec.seed;
  stats["spec"] = spec;
  stats["patients"] = nlohmann::json::array();
  std::vector<std::size_t> totals(spec.n_classes + 1, 0);
  for (auto& j : jobs) {
    auto p = j.get();
    for (std::size_t c = 0; c < totals.size(); ++c) totals[c] += p["class_counts"][c].get<std::size_t>();
    stats["patients"].push_back(std::move(p));
  }
  stats["total_class_counts"] = totals;
  write_json_file((fs::path(dir) / "stats.json").string(), stats);
  return stats;
}

}  // namespace enteroseg
