#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/core/math.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace quadfit::io {

static_assert(std::endian::native == std::endian::little,
              "blob i/o assumes a little-endian host");

template <typename T>
inline void write_raw(const std::string& path, const T* data, size_t n) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
  if (!out) throw IoError("write failed: " + path);
}

template <typename T>
inline std::vector<T> read_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path);
  const auto bytes = static_cast<size_t>(in.tellg());
  if (bytes % sizeof(T) != 0) throw IoError("blob size not a multiple of element size: " + path);
  std::vector<T> data(bytes / sizeof(T));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw IoError("read failed: " + path);
  return data;
}

/// Matrices stored row-major so the JSON header shape reads naturally.
inline void write_matrix_f64(const std::string& path, const MatX& m) {
  std::vector<double> buf(static_cast<size_t>(m.size()));
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c)
      buf[static_cast<size_t>(r * m.cols() + c)] = m(r, c);
  write_raw(path, buf.data(), buf.size());
}

inline MatX read_matrix_f64(const std::string& path, int rows, int cols) {
  const auto buf = read_raw<double>(path);
  if (buf.size() != static_cast<size_t>(rows) * static_cast<size_t>(cols))
    throw IoError("blob shape mismatch: " + path);
  MatX m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = buf[static_cast<size_t>(r * cols + c)];
  return m;
}

inline void write_matrix_f32(const std::string& path, const MatX& m) {
  std::vector<float> buf(static_cast<size_t>(m.size()));
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c)
      buf[static_cast<size_t>(r * m.cols() + c)] = static_cast<float>(m(r, c));
  write_raw(path, buf.data(), buf.size());
}

inline MatX read_matrix_f32(const std::string& path, int rows, int cols) {
  const auto buf = read_raw<float>(path);
  if (buf.size() != static_cast<size_t>(rows) * static_cast<size_t>(cols))
    throw IoError("blob shape mismatch: " + path);
  MatX m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = buf[static_cast<size_t>(r * cols + c)];
  return m;
}

}  // namespace quadfit::io
