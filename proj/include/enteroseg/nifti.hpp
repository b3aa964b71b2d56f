#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "enteroseg/checkpoint.hpp"
#include "enteroseg/error.hpp"
#include "enteroseg/image.hpp"
#include "enteroseg/zcodec.hpp"

namespace enteroseg {

// Single-file NIfTI-1 (.nii / .nii.gz), scalar 3D volumes only.
enum class NiftiDatatype : std::int16_t { uint8 = 2, int16 = 4, float32 = 16 };

struct NiftiVolume {
  std::array<std::size_t, 3> dims{0, 0, 0};
  NiftiDatatype datatype = NiftiDatatype::float32;
  std::array<float, 3> pixdim{1.0f, 1.0f, 1.0f};
  float scl_slope = 1.0f;
  float scl_inter = 0.0f;
  std::vector<float> voxels;  // scaled, x-fastest

  FloatVolume to_volume() const {
    FloatVolume v;
    v.dims = dims;
    v.data = voxels;
    return v;
  }
};

class NiftiError : public FormatError {
 public:
  enum class Code { bad_header, unsupported_form, unsupported_datatype, truncated, bad_dims, non_finite };

  NiftiError(Code code, const std::string& what) : FormatError("nifti: " + what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

namespace nifti_detail {

inline constexpr std::size_t kHeaderSize = 348;
inline constexpr std::size_t kDataOffset = 352;
inline constexpr std::size_t kMaxDim = 4096;

class HeaderView {
 public:
  HeaderView(std::span<const std::uint8_t> b, bool swap) : b_(b), swap_(swap) {}

  template <typename U>
  U get(std::size_t off) const {
    std::array<std::uint8_t, sizeof(U)> raw;
    std::memcpy(raw.data(), b_.data() + off, sizeof(U));
    if (swap_) std::reverse(raw.begin(), raw.end());
    return std::bit_cast<U>(raw);
  }

 private:
  std::span<const std::uint8_t> b_;
  bool swap_;
};

inline bool host_is_little() { return std::endian::native == std::endian::little; }

template <typename U>
void put(std::vector<std::uint8_t>& b, std::size_t off, U v) {
  auto raw = std::bit_cast<std::array<std::uint8_t, sizeof(U)>>(v);
  if (!host_is_little()) std::reverse(raw.begin(), raw.end());
  std::memcpy(b.data() + off, raw.data(), sizeof(U));
}

inline std::size_t bytes_per_voxel(NiftiDatatype t) {
  switch (t) {
    case NiftiDatatype::uint8: return 1;
    case NiftiDatatype::int16: return 2;
    case NiftiDatatype::float32: return 4;
  }
  return 0;
}

}  // namespace nifti_detail

// Parses a complete single-file NIfTI-1 stream, gzip-compressed or not.
// Byte order is taken from sizeof_hdr (348 in either endianness).
inline NiftiVolume parse_nifti(std::span<const std::uint8_t> input) {
  using namespace nifti_detail;
  using Code = NiftiError::Code;
  std::vector<std::uint8_t> inflated;
  std::span<const std::uint8_t> bytes = input;
  if (zcodec::is_gzip(input)) {
    try {
      inflated = zcodec::gunzip(input);
    } catch (const FormatError& e) {
      throw NiftiError(Code::truncated, std::string("gzip stream: ") + e.what());
    }
    bytes = inflated;
  }
  if (bytes.size() < kHeaderSize) {
    throw NiftiError(Code::truncated, "stream shorter than the 348-byte header");
  }
  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, bytes.data(), 4);
  bool swap;
  if (sizeof_hdr == 348) {
    swap = false;
  } else if (HeaderView(bytes, true).get<std::int32_t>(0) == 348) {
    swap = true;
  } else {
    throw NiftiError(Code::bad_header, "sizeof_hdr is not 348 in either byte order");
  }
  const HeaderView h(bytes, swap);

  const char* magic = reinterpret_cast<const char*>(bytes.data() + 344);
  if (std::memcmp(magic, "n+1\0", 4) != 0) {
    if (std::memcmp(magic, "ni1\0", 4) == 0) {
      throw NiftiError(Code::unsupported_form, "two-file (.hdr/.img) form is not supported");
    }
    throw NiftiError(Code::unsupported_form, "bad magic, expected \"n+1\"");
  }

  NiftiVolume vol;
  const auto ndim = h.get<std::int16_t>(40);
  if (ndim < 1 || ndim > 7) throw NiftiError(Code::bad_dims, "dim[0] = " + std::to_string(ndim));
  for (int i = 1; i <= 7; ++i) {
    const std::int16_t d = i <= ndim ? h.get<std::int16_t>(40 + 2 * i) : 1;
    if (d < 1 || static_cast<std::size_t>(d) > kMaxDim) {
      throw NiftiError(Code::bad_dims, "dim[" + std::to_string(i) + "] = " + std::to_string(d) +
                                           " outside [1, 4096]");
    }
    if (i <= 3) {
      vol.dims[i - 1] = static_cast<std::size_t>(d);
    } else if (d != 1) {
      throw NiftiError(Code::bad_dims, "only 3D scalar volumes are supported (dim[" +
                                           std::to_string(i) + "] = " + std::to_string(d) + ")");
    }
  }

  const auto dt = h.get<std::int16_t>(70);
  switch (dt) {
    case 2: vol.datatype = NiftiDatatype::uint8; break;
    case 4: vol.datatype = NiftiDatatype::int16; break;
    case 16: vol.datatype = NiftiDatatype::float32; break;
    default:
      throw NiftiError(Code::unsupported_datatype, "datatype code " + std::to_string(dt) +
                                                       " (supported: uint8, int16, float32)");
  }
  for (int i = 0; i < 3; ++i) {
    const float p = h.get<float>(76 + 4 * (i + 1));
    vol.pixdim[i] = (std::isfinite(p) && p > 0.0f) ? p : 1.0f;
  }
  const float vox_offset = h.get<float>(108);
  float slope = h.get<float>(112);
  float inter = h.get<float>(116);
  if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;
  if (!std::isfinite(inter)) inter = 0.0f;
  vol.scl_slope = slope;
  vol.scl_inter = inter;

  const std::size_t offset =
      vox_offset >= static_cast<float>(kHeaderSize) ? static_cast<std::size_t>(vox_offset) : kDataOffset;
  const std::size_t count = vol.dims[0] * vol.dims[1] * vol.dims[2];
  const std::size_t bpv = bytes_per_voxel(vol.datatype);
  if (bytes.size() < offset || bytes.size() - offset < count * bpv) {
    throw NiftiError(Code::truncated, "data section holds " +
                                          std::to_string(bytes.size() > offset ? bytes.size() - offset : 0) +
                                          " bytes, need " + std::to_string(count * bpv));
  }
  const HeaderView data(bytes.subspan(offset), swap);
  vol.voxels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    double raw = 0.0;
    switch (vol.datatype) {
      case NiftiDatatype::uint8: raw = bytes[offset + i]; break;
      case NiftiDatatype::int16: raw = data.get<std::int16_t>(2 * i); break;
      case NiftiDatatype::float32: raw = data.get<float>(4 * i); break;
    }
    const float v = static_cast<float>(raw * slope + inter);
    if (!std::isfinite(v)) {
      throw NiftiError(Code::non_finite, "non-finite voxel at index " + std::to_string(i));
    }
    vol.voxels[i] = v;
  }
  return vol;
}

// Writes a little-endian single-file NIfTI-1 stream. Voxels are stored
// unscaled (slope 1, intercept 0) in the requested datatype.
inline std::vector<std::uint8_t> encode_nifti(const std::array<std::size_t, 3>& dims,
                                              std::span<const float> voxels, NiftiDatatype datatype,
                                              std::array<float, 3> pixdim = {1.0f, 1.0f, 1.0f}) {
  using namespace nifti_detail;
  if (voxels.size() != dims[0] * dims[1] * dims[2]) throw ShapeError("encode_nifti: size mismatch");
  for (auto d : dims) {
    if (d < 1 || d > kMaxDim) throw ShapeError("encode_nifti: dimension outside [1, 4096]");
  }
  const std::size_t bpv = bytes_per_voxel(datatype);
  std::vector<std::uint8_t> b(kDataOffset + voxels.size() * bpv, 0);
  put<std::int32_t>(b, 0, 348);
  b[38] = 'r';
  put<std::int16_t>(b, 40, 3);
  for (int i = 0; i < 3; ++i) put<std::int16_t>(b, 42 + 2 * i, static_cast<std::int16_t>(dims[i]));
  for (int i = 3; i < 7; ++i) put<std::int16_t>(b, 42 + 2 * i, 1);
  put<std::int16_t>(b, 70, static_cast<std::int16_t>(datatype));
  put<std::int16_t>(b, 72, static_cast<std::int16_t>(bpv * 8));
  put<float>(b, 76, 1.0f);
  for (int i = 0; i < 3; ++i) put<float>(b, 80 + 4 * i, pixdim[i]);
  put<float>(b, 108, static_cast<float>(kDataOffset));
  put<float>(b, 112, 1.0f);
  put<float>(b, 116, 0.0f);
  b[123] = 2;  // xyzt_units: mm
  std::memcpy(b.data() + 344, "n+1\0", 4);
  for (std::size_t i = 0; i < voxels.size(); ++i) {
    const float v = voxels[i];
    switch (datatype) {
      case NiftiDatatype::uint8:
        b[kDataOffset + i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        break;
      case NiftiDatatype::int16:
        put<std::int16_t>(b, kDataOffset + 2 * i,
                          static_cast<std::int16_t>(std::clamp(std::lround(v), -32768L, 32767L)));
        break;
      case NiftiDatatype::float32: put<float>(b, kDataOffset + 4 * i, v); break;
    }
  }
  return b;
}

inline NiftiVolume read_nifti(const std::string& path) {
  return parse_nifti(read_file_bytes(path));
}

// Writes gzip-compressed output when the path ends in ".gz".
inline void write_nifti(const std::string& path, const std::array<std::size_t, 3>& dims,
                        std::span<const float> voxels, NiftiDatatype datatype,
                        std::array<float, 3> pixdim = {1.0f, 1.0f, 1.0f}) {
  auto bytes = encode_nifti(dims, voxels, datatype, pixdim);
  if (path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0) bytes = zcodec::gzip(bytes);
  write_file_bytes(path, bytes);
}

inline LabelVolume to_label_volume(const NiftiVolume& vol) {
  LabelVolume out;
  out.dims = vol.dims;
  out.data.resize(vol.voxels.size());
  for (std::size_t i = 0; i < vol.voxels.size(); ++i) {
    const float v = vol.voxels[i];
    if (v < 0.0f || v > 255.0f || v != std::floor(v)) {
      throw FormatError("label volume holds non-integer or out-of-range value " + std::to_string(v));
    }
    out.data[i] = static_cast<std::uint8_t>(v);
  }
  return out;
}

}  // namespace enteroseg
