#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "volflow/common.hpp"

// Little-endian binary stream helpers shared by the file formats.

namespace volflow::binio {

inline void put_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <class U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_integral_v<U>);
  unsigned char buf[sizeof(U)];
  for (size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(os, buf, sizeof(U));
}

inline void put_f32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_le<uint32_t>(os, bits);
}

inline void put_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_le<uint64_t>(os, bits);
}

inline bool get_bytes(std::istream& is, void* p, size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  return static_cast<size_t>(is.gcount()) == n;
}

template <class U>
bool get_le(std::istream& is, U* out) {
  unsigned char buf[sizeof(U)];
  if (!get_bytes(is, buf, sizeof(U))) return false;
  U v = 0;
  for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  *out = v;
  return true;
}

inline bool get_f32(std::istream& is, float* out) {
  uint32_t bits;
  if (!get_le(is, &bits)) return false;
  std::memcpy(out, &bits, 4);
  return true;
}

inline bool get_f64(std::istream& is, double* out) {
  uint64_t bits;
  if (!get_le(is, &bits)) return false;
  std::memcpy(out, &bits, 8);
  return true;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(cat("cannot open '", path, "' for writing"));
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(cat("cannot open '", path, "' for reading"));
  return is;
}

inline void expect_magic(std::istream& is, const char magic[4], const std::string& path) {
  char buf[4];
  if (!get_bytes(is, buf, 4) || std::memcmp(buf, magic, 4) != 0)
    throw IoError(cat("bad magic in '", path, "': expected ", std::string(magic, 4)));
}

}  // namespace volflow::binio
