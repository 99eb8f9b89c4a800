#pragma once

// Little-endian primitives shared by the distribution and checkpoint formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <utility>

#include "structobs/errors.hpp"

namespace structobs::binary {

namespace detail {

template <class T>
std::array<char, sizeof(T)> to_le_bytes(T value) {
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  return bytes;
}

template <class T>
T from_le_bytes(std::array<char, sizeof(T)> bytes) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace detail

inline void write_u64(std::ostream& out, std::uint64_t value) {
  const auto bytes = detail::to_le_bytes(value);
  out.write(bytes.data(), bytes.size());
}

inline void write_f64(std::ostream& out, double value) {
  const auto bytes = detail::to_le_bytes(std::bit_cast<std::uint64_t>(value));
  out.write(bytes.data(), bytes.size());
}

inline void write_bytes(std::ostream& out, const std::string& bytes) {
  write_u64(out, bytes.size());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::uint64_t read_u64(std::istream& in) {
  std::array<char, 8> bytes;
  if (!in.read(bytes.data(), bytes.size())) throw FormatError("unexpected end of stream");
  return detail::from_le_bytes<std::uint64_t>(bytes);
}

inline double read_f64(std::istream& in) { return std::bit_cast<double>(read_u64(in)); }

inline std::string read_bytes(std::istream& in, std::uint64_t limit = 1ULL << 32) {
  const std::uint64_t n = read_u64(in);
  if (n > limit) throw FormatError("length prefix too large");
  std::string bytes(n, '\0');
  if (n > 0 && !in.read(bytes.data(), static_cast<std::streamsize>(n))) {
    throw FormatError("unexpected end of stream");
  }
  return bytes;
}

}  // namespace structobs::binary
