#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "enteroseg/error.hpp"
#include "enteroseg/tensor.hpp"

namespace enteroseg {

// Parameter checkpoint, little-endian:
//   "ESEG" | version u32 | count u32 |
//   per array: name_len u16 | name bytes | rank u8 | extents u32 x rank | f32 x numel
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;

  bool operator==(const NamedArray&) const = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename U>
  void le(U v) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      out_.push_back(static_cast<std::uint8_t>(static_cast<std::make_unsigned_t<U>>(v) >> (8 * i)));
    }
  }
  void f32(float f) { le(std::bit_cast<std::uint32_t>(f)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}
  template <typename U>
  U le() {
    need(sizeof(U));
    std::make_unsigned_t<U> v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<std::make_unsigned_t<U>>(in_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw FormatError("checkpoint: truncated stream");
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedArray>& arrays) {
  detail::ByteWriter w;
  w.raw("ESEG", 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    if (a.name.size() > UINT16_MAX) throw FormatError("checkpoint: name too long: " + a.name);
    if (a.shape.size() > UINT8_MAX) throw FormatError("checkpoint: rank too large: " + a.name);
    if (shape_numel(a.shape) != a.values.size()) {
      throw ShapeError("checkpoint: array " + a.name + " shape/value mismatch");
    }
    w.le<std::uint16_t>(static_cast<std::uint16_t>(a.name.size()));
    w.raw(a.name.data(), a.name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(a.shape.size()));
    for (auto e : a.shape) w.le<std::uint32_t>(static_cast<std::uint32_t>(e));
    for (float f : a.values) w.f32(f);
  }
  return w.take();
}

inline std::vector<NamedArray> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.str(4) != "ESEG") throw FormatError("checkpoint: bad magic");
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = r.le<std::uint32_t>();
  std::vector<NamedArray> arrays;
  arrays.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.str(r.le<std::uint16_t>());
    const auto rank = r.le<std::uint8_t>();
    for (std::uint8_t d = 0; d < rank; ++d) a.shape.push_back(r.le<std::uint32_t>());
    a.values.resize(shape_numel(a.shape));
    for (auto& f : a.values) f = r.f32();
    arrays.push_back(std::move(a));
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return arrays;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path);
}

inline void save_checkpoint(const std::string& path, const std::vector<NamedArray>& arrays) {
  write_file_bytes(path, encode_checkpoint(arrays));
}

inline std::vector<NamedArray> load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace enteroseg
