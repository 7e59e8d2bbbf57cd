#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "crabs/common.hpp"

namespace crabs {

// All on-disk binary records are little-endian regardless of host order.
struct ByteWriter {
  std::vector<std::uint8_t> buf;

  void u8(std::uint8_t v) { buf.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(std::uint8_t(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(std::uint8_t(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void magic(const char tag[9]) {  // 8 significant bytes
    for (int i = 0; i < 8; ++i) buf.push_back(std::uint8_t(tag[i]));
  }
  void vec(const Vec& v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  void str(const std::string& s) {
    u64(s.size());
    buf.insert(buf.end(), s.begin(), s.end());
  }

  void to_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    out.write(reinterpret_cast<const char*>(buf.data()),
              std::streamsize(buf.size()));
    if (!out) throw std::runtime_error("short write: " + path);
  }
};

struct ByteReader {
  std::vector<std::uint8_t> buf;
  std::size_t pos = 0;

  static ByteReader from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for read: " + path);
    ByteReader r;
    r.buf.assign(std::istreambuf_iterator<char>(in),
                 std::istreambuf_iterator<char>());
    return r;
  }

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw std::runtime_error("truncated record");
  }
  std::uint8_t u8() {
    need(1);
    return buf[pos++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  void expect_magic(const char tag[9]) {
    need(8);
    for (int i = 0; i < 8; ++i)
      if (buf[pos + i] != std::uint8_t(tag[i]))
        throw std::runtime_error(std::string("bad magic, expected ") + tag);
    pos += 8;
  }
  Vec vec() {
    std::uint64_t n = u64();
    need(n * 8);
    Vec v(n);
    for (auto& x : v) x = f64();
    return v;
  }
  std::string str() {
    std::uint64_t n = u64();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  bool done() const { return pos == buf.size(); }
};

}  // namespace crabs
