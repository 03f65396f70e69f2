#pragma once

// Little-endian byte buffer reader/writer used by the dataset and checkpoint
// containers. Readers validate every access and report absolute byte offsets.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "looprec/common.hpp"

namespace looprec {

class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u32(uint32_t v) { le((const uint8_t*)&v, 4); }
  void u64(uint64_t v) { le((const uint8_t*)&v, 8); }
  void f32(float v) { le((const uint8_t*)&v, 4); }
  void f64(double v) { le((const uint8_t*)&v, 8); }
  void bytes(const void* p, size_t n) {
    const uint8_t* b = (const uint8_t*)p;
    buf_.insert(buf_.end(), b, b + n);
  }
  void tag(const char t[4]) { bytes(t, 4); }
  void str(const std::string& s) {
    u32((uint32_t)s.size());
    bytes(s.data(), s.size());
  }

  size_t size() const { return buf_.size(); }
  const std::vector<uint8_t>& data() const { return buf_; }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), cat("cannot open for writing: ", path));
    f.write((const char*)buf_.data(), (std::streamsize)buf_.size());
    check(f.good(), cat("write failed: ", path));
  }

 private:
  void le(const uint8_t* p, size_t n) { bytes(p, n); }  // little-endian host assumed
  std::vector<uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<uint8_t> data, std::string name)
      : buf_(std::move(data)), name_(std::move(name)) {}

  static ByteReader from_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    check(f.good(), cat("cannot open: ", path));
    std::streamsize n = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> data((size_t)n);
    f.read((char*)data.data(), n);
    check(f.good(), cat("read failed: ", path));
    return ByteReader(std::move(data), path);
  }

  size_t pos() const { return pos_; }
  size_t size() const { return buf_.size(); }
  size_t remaining() const { return buf_.size() - pos_; }
  bool eof() const { return pos_ == buf_.size(); }

  void need(size_t n, const char* what) const {
    if (remaining() < n)
      fail(cat(name_, ": truncated ", what, " at byte offset ", pos_, " (need ", n, ", have ",
               remaining(), ")"));
  }

  uint8_t u8(const char* what = "u8") {
    need(1, what);
    return buf_[pos_++];
  }
  uint32_t u32(const char* what = "u32") {
    need(4, what);
    uint32_t v;
    std::memcpy(&v, buf_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  uint64_t u64(const char* what = "u64") {
    need(8, what);
    uint64_t v;
    std::memcpy(&v, buf_.data() + pos_, 8);
    pos_ += 8;
    return v;
  }
  float f32(const char* what = "f32") {
    need(4, what);
    float v;
    std::memcpy(&v, buf_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  double f64(const char* what = "f64") {
    need(8, what);
    double v;
    std::memcpy(&v, buf_.data() + pos_, 8);
    pos_ += 8;
    return v;
  }
  void bytes(void* out, size_t n, const char* what = "bytes") {
    need(n, what);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::string tag4(const char* what = "section tag") {
    need(4, what);
    std::string t((const char*)buf_.data() + pos_, 4);
    pos_ += 4;
    return t;
  }
  std::string str(const char* what = "string") {
    uint32_t n = u32(what);
    need(n, what);
    std::string s((const char*)buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  const std::string& name() const { return name_; }

 private:
  std::vector<uint8_t> buf_;
  std::string name_;
  size_t pos_ = 0;
};

}  // namespace looprec
