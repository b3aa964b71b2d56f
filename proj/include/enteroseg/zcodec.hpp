#pragma once

#include <zlib.h>

#include <cstdint>
#include <span>
#include <vector>

#include "enteroseg/error.hpp"

namespace enteroseg::zcodec {

inline bool is_gzip(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 2 && bytes[0] == 0x1F && bytes[1] == 0x8B;
}

namespace detail {

inline std::vector<std::uint8_t> deflate_with(std::span<const std::uint8_t> in, int window_bits) {
  z_stream zs{};
  if (deflateInit2(&zs, 6, Z_DEFLATED, window_bits, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
    throw FormatError("zlib: deflateInit2 failed");
  }
  std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(in.size())) + 32);
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  const auto produced = zs.total_out;
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw FormatError("zlib: deflate did not finish");
  out.resize(produced);
  return out;
}

inline std::vector<std::uint8_t> inflate_with(std::span<const std::uint8_t> in, int window_bits) {
  z_stream zs{};
  if (inflateInit2(&zs, window_bits) != Z_OK) throw FormatError("zlib: inflateInit2 failed");
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 15];
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = buf;
    zs.avail_out = sizeof(buf);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw FormatError("zlib: corrupt or truncated compressed stream");
    }
    out.insert(out.end(), buf, buf + (sizeof(buf) - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw FormatError("zlib: truncated compressed stream");
    }
  }
  inflateEnd(&zs);
  return out;
}

}  // namespace detail

// zlib-wrapped deflate (PNG IDAT payloads).
inline std::vector<std::uint8_t> compress(std::span<const std::uint8_t> in) {
  return detail::deflate_with(in, MAX_WBITS);
}
inline std::vector<std::uint8_t> decompress(std::span<const std::uint8_t> in) {
  return detail::inflate_with(in, MAX_WBITS);
}

// gzip container with a zero mtime, so output depends only on the input.
inline std::vector<std::uint8_t> gzip(std::span<const std::uint8_t> in) {
  return detail::deflate_with(in, MAX_WBITS + 16);
}
inline std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> in) {
  return detail::inflate_with(in, MAX_WBITS + 16);
}

inline std::uint32_t crc(std::span<const std::uint8_t> bytes, std::uint32_t seed = 0) {
  return static_cast<std::uint32_t>(
      crc32(seed, bytes.data(), static_cast<uInt>(bytes.size())));
}

}  // namespace enteroseg::zcodec
