#pragma once

// Little-endian primitives shared by the checkpoint and clip containers.
// Values are (de)composed byte by byte so the layout does not depend on the
// host byte order.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "cliporder/errors.hpp"

namespace cliporder::wire {

inline void put_u8(std::ostream& os, std::uint8_t v) {
  os.put(static_cast<char>(v));
}

inline void put_u16(std::ostream& os, std::uint16_t v) {
  put_u8(os, static_cast<std::uint8_t>(v & 0xff));
  put_u8(os, static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) put_u8(os, static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) put_u8(os, static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline std::uint8_t get_u8(std::istream& is, const std::string& what) {
  const int c = is.get();
  if (c == std::istream::traits_type::eof()) {
    throw FormatError("truncated file while reading " + what);
  }
  return static_cast<std::uint8_t>(c);
}

inline std::uint16_t get_u16(std::istream& is, const std::string& what) {
  std::uint16_t v = get_u8(is, what);
  v |= static_cast<std::uint16_t>(get_u8(is, what)) << 8;
  return v;
}

inline std::uint32_t get_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(get_u8(is, what)) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is, const std::string& what) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(get_u8(is, what)) << (8 * i);
  return v;
}

inline float get_f32(std::istream& is, const std::string& what) {
  return std::bit_cast<float>(get_u32(is, what));
}

inline double get_f64(std::istream& is, const std::string& what) {
  return std::bit_cast<double>(get_u64(is, what));
}

inline std::string get_string(std::istream& is, std::size_t len, const std::string& what) {
  std::string s(len, '\0');
  if (len > 0) {
    is.read(s.data(), static_cast<std::streamsize>(len));
    if (static_cast<std::size_t>(is.gcount()) != len) {
      throw FormatError("truncated file while reading " + what);
    }
  }
  return s;
}

}  // namespace cliporder::wire
