#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vslm/types.hpp"

namespace vslm::io {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (is.gcount() != static_cast<std::streamsize>(n))
    throw std::runtime_error("unexpected end of file");
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  write_bytes(os, &v, sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v;
  read_bytes(is, &v, sizeof(T));
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint64_t>(os, s.size());
  write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is) {
  const auto n = read_pod<std::uint64_t>(is);
  std::string s(n, '\0');
  read_bytes(is, s.data(), n);
  return s;
}

inline void write_magic(std::ostream& os, const char m[5]) { write_bytes(os, m, 4); }

inline void expect_magic(std::istream& is, const char m[5], const std::string& what) {
  char got[4];
  read_bytes(is, got, 4);
  if (std::memcmp(got, m, 4) != 0) throw std::runtime_error("bad magic in " + what);
}

/// Matrices are stored column by column; with the [channels x frames]
/// convention that is frame-major on disk. dtype: 0 = f32, 1 = f64.
template <typename S>
void write_matrix(std::ostream& os, const MatX<S>& m, int dtype) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
  write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
  if (dtype == 0) {
    MatX<float> f = m.template cast<float>();
    write_bytes(os, f.data(), sizeof(float) * f.size());
  } else {
    MatX<double> d = m.template cast<double>();
    write_bytes(os, d.data(), sizeof(double) * d.size());
  }
}

template <typename S>
MatX<S> read_matrix(std::istream& is) {
  const auto rows = read_pod<std::uint32_t>(is);
  const auto cols = read_pod<std::uint32_t>(is);
  const auto dtype = read_pod<std::uint8_t>(is);
  if (dtype == 0) {
    MatX<float> f(rows, cols);
    read_bytes(is, f.data(), sizeof(float) * f.size());
    return f.template cast<S>();
  }
  MatX<double> d(rows, cols);
  read_bytes(is, d.data(), sizeof(double) * d.size());
  return d.template cast<S>();
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path);
  return is;
}

}  // namespace vslm::io
