#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "pskd/common.hpp"

namespace pskd {

// Little binary reader/writer pair used by every on-disk format in the
// project. The reader tracks a byte offset and the section being parsed so
// corrupt or truncated files fail with a position diagnostic.

class BinWriter {
 public:
  void u32(uint32_t v) { raw(&v, sizeof v); }
  void u64(uint64_t v) { raw(&v, sizeof v); }
  void i32(int32_t v) { raw(&v, sizeof v); }
  void f32(float v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void f64s(const std::vector<double>& v) {
    u64(v.size());
    raw(v.data(), v.size() * sizeof(double));
  }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }

  const std::vector<uint8_t>& bytes() const { return bytes_; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes_.data()),
              static_cast<std::streamsize>(bytes_.size()));
    if (!out) fail("write failed: " + path);
  }

 private:
  std::vector<uint8_t> bytes_;
};

class BinReader {
 public:
  explicit BinReader(std::vector<uint8_t> bytes, std::string what = "stream")
      : bytes_(std::move(bytes)), what_(std::move(what)) {}

  static BinReader from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open for reading: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return BinReader(std::move(bytes), path);
  }

  /// Names the section subsequent reads belong to; used in error messages.
  void section(std::string name) { section_ = std::move(name); }
  const std::string& section() const { return section_; }

  uint32_t u32() { return get<uint32_t>(); }
  uint64_t u64() { return get<uint64_t>(); }
  int32_t i32() { return get<int32_t>(); }
  float f32() { return get<float>(); }
  double f64() { return get<double>(); }

  std::vector<double> f64s() {
    const uint64_t n = u64();
    if (n > (bytes_.size() - pos_) / sizeof(double))
      error("element count " + std::to_string(n) + " exceeds remaining bytes");
    std::vector<double> v(n);
    std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }

  std::string str() {
    const uint32_t n = u32();
    if (n > bytes_.size() - pos_) error("string length exceeds remaining bytes");
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }
  size_t offset() const { return pos_; }

  [[noreturn]] void error(const std::string& msg) const {
    fail(what_ + ": in section '" + section_ + "' at byte " + std::to_string(pos_) + ": " + msg);
  }

 private:
  template <class T>
  T get() {
    if (sizeof(T) > bytes_.size() - pos_) error("unexpected end of file");
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::vector<uint8_t> bytes_;
  std::string what_;
  std::string section_ = "header";
  size_t pos_ = 0;
};

}  // namespace pskd
