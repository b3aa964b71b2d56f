#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <span>
#include <string>
#include <vector>

#include "enteroseg/error.hpp"
#include "enteroseg/image.hpp"
#include "enteroseg/zcodec.hpp"

namespace enteroseg {

inline constexpr std::array<std::uint8_t, 8> kPngSignature = {0x89, 0x50, 0x4E, 0x47,
                                                              0x0D, 0x0A, 0x1A, 0x0A};

// Mask palette: palette index == class index.
inline constexpr std::array<std::array<std::uint8_t, 3>, kNumClasses> kMaskPalette = {{
    {0, 0, 0},        // background
    {230, 25, 75},    // stomach
    {245, 130, 48},   // duodenum
    {255, 225, 25},   // small intestine
    {210, 245, 60},   // appendix
    {60, 180, 75},    // cecum
    {70, 240, 240},   // ascending colon
    {0, 130, 200},    // transverse colon
    {145, 30, 180},   // descending colon
    {240, 50, 230},   // sigmoid colon
    {128, 128, 128},  // rectum
}};

// 8-bit, non-interlaced PNG reduced to what the pipeline reads and writes:
// grayscale (color type 0) and palette (color type 3).
struct PngImage {
  std::size_t width = 0, height = 0;
  std::uint8_t color_type = 0;
  std::vector<std::array<std::uint8_t, 3>> palette;
  std::vector<std::uint8_t> samples;  // one byte per pixel, row-major
};

namespace png_detail {

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline std::uint32_t get_be32(std::span<const std::uint8_t> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

inline void chunk(std::vector<std::uint8_t>& out, const char type[4],
                  std::span<const std::uint8_t> data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  put_be32(out, zcodec::crc(std::span(out).subspan(start)));
}

inline std::uint8_t paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<std::uint8_t>(a);
  if (pb <= pc) return static_cast<std::uint8_t>(b);
  return static_cast<std::uint8_t>(c);
}

}  // namespace png_detail

// Rows are written with filter type 0 so the output depends only on the
// pixels and the zlib level.
inline std::vector<std::uint8_t> encode_png(const PngImage& img) {
  using namespace png_detail;
  if (img.samples.size() != img.width * img.height || img.width == 0 || img.height == 0) {
    throw ShapeError("encode_png: sample count does not match dimensions");
  }
  if (img.color_type != 0 && img.color_type != 3) throw FormatError("encode_png: unsupported color type");
  std::vector<std::uint8_t> out(kPngSignature.begin(), kPngSignature.end());
  std::vector<std::uint8_t> ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(img.width));
  put_be32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.insert(ihdr.end(), {8, img.color_type, 0, 0, 0});
  chunk(out, "IHDR", ihdr);
  if (img.color_type == 3) {
    std::vector<std::uint8_t> plte;
    for (const auto& rgb : img.palette) plte.insert(plte.end(), rgb.begin(), rgb.end());
    chunk(out, "PLTE", plte);
  }
  std::vector<std::uint8_t> raw;
  raw.reserve(img.height * (img.width + 1));
  for (std::size_t y = 0; y < img.height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), img.samples.begin() + y * img.width, img.samples.begin() + (y + 1) * img.width);
  }
  chunk(out, "IDAT", zcodec::compress(raw));
  chunk(out, "IEND", {});
  return out;
}

inline PngImage decode_png(std::span<const std::uint8_t> bytes) {
  using namespace png_detail;
  if (bytes.size() < 8 || !std::equal(kPngSignature.begin(), kPngSignature.end(), bytes.begin())) {
    throw FormatError("png: missing signature");
  }
  PngImage img;
  std::vector<std::uint8_t> idat;
  bool have_header = false, ended = false;
  std::size_t pos = 8;
  while (pos + 12 <= bytes.size() && !ended) {
    const std::uint32_t len = get_be32(bytes, pos);
    if (pos + 12 + len > bytes.size()) throw FormatError("png: truncated chunk");
    const std::string type(reinterpret_cast<const char*>(bytes.data() + pos + 4), 4);
    const auto data = bytes.subspan(pos + 8, len);
    if (zcodec::crc(bytes.subspan(pos + 4, len + 4)) != get_be32(bytes, pos + 8 + len)) {
      throw FormatError("png: CRC mismatch in " + type + " chunk");
    }
    if (type == "IHDR") {
      if (len != 13) throw FormatError("png: bad IHDR length");
      img.width = get_be32(data, 0);
      img.height = get_be32(data, 4);
      const std::uint8_t depth = data[8];
      img.color_type = data[9];
      if (depth != 8 || (img.color_type != 0 && img.color_type != 3) || data[12] != 0) {
        throw FormatError("png: only 8-bit non-interlaced grayscale or palette images are supported");
      }
      have_header = true;
    } else if (type == "PLTE") {
      for (std::size_t i = 0; i + 2 < len; i += 3) img.palette.push_back({data[i], data[i + 1], data[i + 2]});
    } else if (type == "IDAT") {
      idat.insert(idat.end(), data.begin(), data.end());
    } else if (type == "IEND") {
      ended = true;
    }
    pos += 12 + len;
  }
  if (!have_header || !ended) throw FormatError("png: missing IHDR or IEND");
  const auto raw = zcodec::decompress(idat);
  const std::size_t stride = img.width;
  if (raw.size() != img.height * (stride + 1)) throw FormatError("png: image data size mismatch");
  img.samples.assign(img.width * img.height, 0);
  for (std::size_t y = 0; y < img.height; ++y) {
    const std::uint8_t filter = raw[y * (stride + 1)];
    const std::uint8_t* src = raw.data() + y * (stride + 1) + 1;
    std::uint8_t* row = img.samples.data() + y * stride;
    const std::uint8_t* prev = y ? row - stride : nullptr;
    for (std::size_t x = 0; x < stride; ++x) {
      const int a = x ? row[x - 1] : 0;
      const int b = prev ? prev[x] : 0;
      const int c = (prev && x) ? prev[x - 1] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw FormatError("png: unknown filter type " + std::to_string(filter));
      }
      row[x] = static_cast<std::uint8_t>(v);
    }
  }
  return img;
}

inline std::vector<std::uint8_t> encode_mask_png(const LabelMask& m) {
  for (auto l : m.labels) {
    if (l >= kNumClasses) throw Error("encode_mask_png: label " + std::to_string(l) + " exceeds 10");
  }
  PngImage img{m.width, m.height, 3, {kMaskPalette.begin(), kMaskPalette.end()}, m.labels};
  return encode_png(img);
}

inline LabelMask decode_mask_png(std::span<const std::uint8_t> bytes) {
  PngImage img = decode_png(bytes);
  for (auto s : img.samples) {
    if (s >= kNumClasses) {
      throw FormatError("decode_mask_png: index " + std::to_string(s) + " exceeds label range 0..10");
    }
  }
  return LabelMask{img.width, img.height, std::move(img.samples)};
}

// 8-bit grayscale slice. Intensities are mapped linearly from [lo, hi] to
// [0, 255]; the mapping is chosen per volume by the caller.
inline std::vector<std::uint8_t> encode_gray_png(const GrayscaleSlice& s, float lo, float hi) {
  PngImage img{s.width, s.height, 0, {}, std::vector<std::uint8_t>(s.pixels.size())};
  const float span = hi > lo ? hi - lo : 1.0f;
  for (std::size_t i = 0; i < s.pixels.size(); ++i) {
    const float v = (s.pixels[i] - lo) / span * 255.0f;
    img.samples[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }
  return encode_png(img);
}

inline GrayscaleSlice decode_gray_png(std::span<const std::uint8_t> bytes) {
  PngImage img = decode_png(bytes);
  if (img.color_type != 0) throw FormatError("decode_gray_png: not a grayscale PNG");
  GrayscaleSlice s;
  s.width = img.width;
  s.height = img.height;
  s.pixels.assign(img.samples.begin(), img.samples.end());
  return s;
}

}  // namespace enteroseg
