#pragma once

// Little-endian binary helpers for the model, dataset and checkpoint containers.

#include "aios/common.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

namespace aios::bin {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <typename T>
void write(std::ostream& os, T v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("unexpected end of binary stream");
  return to_little(v);
}

inline void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), static_cast<std::streamsize>(magic.size())); }

inline void expect_magic(std::istream& is, std::string_view magic) {
  std::string buf(magic.size(), '\0');
  is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!is || buf != magic) throw IoError("bad magic: expected " + std::string(magic));
}

// Row-major matrix payload as f64.
inline void write_f64(std::ostream& os, const Mat& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) write<double>(os, m.data()[i]);
}

inline void read_f64(std::istream& is, Mat& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = read<double>(is);
}

// Row-major matrix payload as f32.
inline void write_f32(std::ostream& os, const Mat& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) write<float>(os, static_cast<float>(m.data()[i]));
}

inline void read_f32(std::istream& is, Mat& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(read<float>(is));
}

}  // namespace aios::bin
