#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "protodist/errors.hpp"

// Little-endian binary stream helpers shared by the container formats
// (checkpoints, prototypes, dataset items).
namespace protodist::bytes {

inline void write_u8(std::ostream& os, std::uint8_t v) {
  os.put(static_cast<char>(v));
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

inline void write_f64(std::ostream& os, double v) {
  write_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline void read_exact(std::istream& is, char* buf, std::size_t n, const char* what) {
  is.read(buf, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw IoError(std::string("truncated file while reading ") + what);
  }
}

inline std::uint8_t read_u8(std::istream& is, const char* what) {
  char b;
  read_exact(is, &b, 1, what);
  return static_cast<std::uint8_t>(b);
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
  char b[4];
  read_exact(is, b, 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& is, const char* what) {
  char b[8];
  read_exact(is, b, 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}

inline double read_f64(std::istream& is, const char* what) {
  return std::bit_cast<double>(read_u64(is, what));
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const char* what) {
  std::uint32_t n = read_u32(is, what);
  std::string s(n, '\0');
  if (n) read_exact(is, s.data(), n, what);
  return s;
}

}  // namespace protodist::bytes
