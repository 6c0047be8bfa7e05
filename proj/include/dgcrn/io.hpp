#pragma once

// Little-endian byte encoding and the named-record container used for model
// checkpoints and graph caches.
//
// Container layout:
//   magic "DGCRNCKPT\x01"                      10 bytes
//   u32 record count
//   per record:
//     u32 name length, UTF-8 name bytes
//     u8  dtype tag (1 = f32, 2 = f64, 3 = i64, 4 = utf8 text)
//     u32 rank, rank x u64 extents
//     raw little-endian values (text: `extent[0]` bytes)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dgcrn/error.hpp"
#include "dgcrn/tensor.hpp"

namespace dgcrn {

class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void i64(std::int64_t v) { put_le(static_cast<std::uint64_t>(v)); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }

  const std::string& data() const { return buf_; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw IoError("short write to " + path);
  }

 private:
  template <class U>
  void put_le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string data, std::string origin = "buffer")
      : buf_(std::move(data)), origin_(std::move(origin)) {}

  static ByteReader from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return ByteReader(std::move(data), path);
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void expect(std::string_view magic) {
    if (bytes(magic.size()) != magic) throw IoError(origin_ + ": bad magic header");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  std::int64_t i64() { return static_cast<std::int64_t>(get_le<std::uint64_t>()); }
  float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }

  bool at_end() const { return pos_ == buf_.size(); }
  const std::string& origin() const { return origin_; }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw IoError(origin_ + ": truncated file");
  }
  template <class U>
  U get_le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------

inline constexpr std::string_view kCheckpointMagic{"DGCRNCKPT\x01", 10};

enum class DType : std::uint8_t { f32 = 1, f64 = 2, i64 = 3, text = 4 };

struct Record {
  std::string name;
  DType dtype = DType::f64;
  Shape shape;
  std::vector<double> values;  // f32/f64/i64 payloads, widened
  std::string text;            // text payload
};

class Container {
 public:
  std::vector<Record> records;

  void add_text(std::string name, std::string text) {
    Record r;
    r.name = std::move(name);
    r.dtype = DType::text;
    r.shape = {text.size()};
    r.text = std::move(text);
    records.push_back(std::move(r));
  }

  template <class T>
  void add_tensor(std::string name, const Tensor<T>& t) {
    Record r;
    r.name = std::move(name);
    r.dtype = sizeof(T) == 4 ? DType::f32 : DType::f64;
    r.shape = t.shape();
    r.values.assign(t.data().begin(), t.data().end());
    records.push_back(std::move(r));
  }

  void add_values(std::string name, DType dtype, Shape shape, std::vector<double> values) {
    if (numel(shape) != values.size()) throw DimensionError("record " + name + ": shape/value count mismatch");
    records.push_back(Record{std::move(name), dtype, std::move(shape), std::move(values), {}});
  }

  const Record* find(std::string_view name) const {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }
  const Record& get(std::string_view name) const {
    if (const auto* r = find(name)) return *r;
    throw IoError("container has no record named '" + std::string(name) + "'");
  }

  std::string encode() const {
    ByteWriter w;
    w.bytes(kCheckpointMagic);
    w.u32(static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
      w.u32(static_cast<std::uint32_t>(r.name.size()));
      w.bytes(r.name);
      w.u8(static_cast<std::uint8_t>(r.dtype));
      w.u32(static_cast<std::uint32_t>(r.shape.size()));
      for (auto d : r.shape) w.u64(d);
      switch (r.dtype) {
        case DType::f32:
          for (double v : r.values) w.f32(static_cast<float>(v));
          break;
        case DType::f64:
          for (double v : r.values) w.f64(v);
          break;
        case DType::i64:
          for (double v : r.values) w.i64(static_cast<std::int64_t>(v));
          break;
        case DType::text:
          w.bytes(r.text);
          break;
      }
    }
    return w.data();
  }

  void save(const std::string& path) const {
    ByteWriter w;
    w.bytes(encode());
    w.save(path);
  }

  static Container decode(ByteReader& in) {
    in.expect(kCheckpointMagic);
    Container c;
    const auto count = in.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      Record r;
      r.name = in.bytes(in.u32());
      const auto tag = in.u8();
      if (tag < 1 || tag > 4) throw IoError(in.origin() + ": unknown dtype tag " + std::to_string(tag));
      r.dtype = static_cast<DType>(tag);
      const auto rank = in.u32();
      for (std::uint32_t k = 0; k < rank; ++k) r.shape.push_back(in.u64());
      const std::size_t n = numel(r.shape);
      switch (r.dtype) {
        case DType::f32:
          r.values.resize(n);
          for (auto& v : r.values) v = in.f32();
          break;
        case DType::f64:
          r.values.resize(n);
          for (auto& v : r.values) v = in.f64();
          break;
        case DType::i64:
          r.values.resize(n);
          for (auto& v : r.values) v = static_cast<double>(in.i64());
          break;
        case DType::text:
          r.text = in.bytes(n);
          break;
      }
      c.records.push_back(std::move(r));
    }
    if (!in.at_end()) throw IoError(in.origin() + ": trailing bytes after last record");
    return c;
  }

  static Container load(const std::string& path) {
    auto in = ByteReader::from_file(path);
    return decode(in);
  }
};

}  // namespace dgcrn
