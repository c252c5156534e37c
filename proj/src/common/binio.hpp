#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "common/error.hpp"

namespace xnn {

// Little-endian byte buffer writer. All binary artifact formats use this so
// files are byte-identical across hosts.
class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint16_t v) { le(v); }
  void u32(uint32_t v) { le(v); }
  void u64(uint64_t v) { le(v); }
  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    le(bits);
  }
  void f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    le(bits);
  }
  void bytes(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

  const std::vector<uint8_t>& data() const { return buf_; }
  std::vector<uint8_t> take() { return std::move(buf_); }

 private:
  template <typename T>
  void le(T v) {
    for (size_t i = 0; i < sizeof(T); ++i)
      buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  std::vector<uint8_t> buf_;
};

// Bounds-checked little-endian reader; short reads throw ParseError::Truncated.
class ByteReader {
 public:
  ByteReader(const uint8_t* data, size_t size) : data_(data), size_(size) {}
  explicit ByteReader(const std::vector<uint8_t>& v)
      : ByteReader(v.data(), v.size()) {}

  uint8_t u8() { return le<uint8_t>(); }
  uint16_t u16() { return le<uint16_t>(); }
  uint32_t u32() { return le<uint32_t>(); }
  uint64_t u64() { return le<uint64_t>(); }
  double f64() {
    uint64_t bits = le<uint64_t>();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  float f32() {
    uint32_t bits = le<uint32_t>();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  void bytes(void* out, size_t n) {
    need(n);
    std::memcpy(out, data_ + pos_, n);
    pos_ += n;
  }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }

  size_t pos() const { return pos_; }
  size_t remaining() const { return size_ - pos_; }

 private:
  template <typename T>
  T le() {
    need(sizeof(T));
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<T>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  void need(size_t n) {
    if (pos_ + n > size_)
      throw ParseError(ParseError::Kind::Truncated, "truncated input");
  }
  const uint8_t* data_;
  size_t size_;
  size_t pos_ = 0;
};

uint32_t crc32_of(const uint8_t* data, size_t n);
uint64_t fnv1a64(const uint8_t* data, size_t n);
inline uint64_t fnv1a64(const std::vector<uint8_t>& v) {
  return fnv1a64(v.data(), v.size());
}
uint64_t fnv1a64_str(const std::string& s);

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path);
// Write-temp-then-rename so partially written artifacts never appear.
void atomic_write_file(const std::filesystem::path& path,
                       const void* data, size_t size);
inline void atomic_write_file(const std::filesystem::path& path,
                              const std::vector<uint8_t>& v) {
  atomic_write_file(path, v.data(), v.size());
}
void atomic_write_text(const std::filesystem::path& path, const std::string& s);

}  // namespace xnn
