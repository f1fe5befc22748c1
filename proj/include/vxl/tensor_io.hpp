#pragma once

// VXT1 tensor records: "VXT1", u32 rows, u32 cols, u8 precision code (4|8),
// then rows*cols little-endian elements. Records may be concatenated.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>

#include "vxl/numerics.hpp"

namespace vxl::io {

static_assert(std::endian::native == std::endian::little, "VXT1 I/O assumes a little-endian host");

inline constexpr std::array<char, 4> kVxtMagic = {'V', 'X', 'T', '1'};

namespace detail {

template <class U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U get(std::istream& is, const char* what) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) fail_input(std::string("VXT1: truncated record while reading ") + what);
  return v;
}

}  // namespace detail

// Writes `m` at the requested precision (defaults to the native one).
template <class T>
void write_tensor(std::ostream& os, const Mat<T>& m, Precision prec = precision_of<T>()) {
  if (m.rows() > UINT32_MAX || m.cols() > UINT32_MAX) fail_input("VXT1: shape " + m.shape() + " exceeds u32");
  os.write(kVxtMagic.data(), 4);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
  detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(prec));
  for (T x : m.flat()) {
    if (prec == Precision::f32)
      detail::put<float>(os, static_cast<float>(x));
    else
      detail::put<double>(os, static_cast<double>(x));
  }
  if (!os) fail_internal("VXT1: write failed");
}

struct TensorRecord {
  Precision precision;
  Mat<double> values;
};

inline TensorRecord read_tensor_record(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || magic != kVxtMagic) fail_input("VXT1: bad magic");
  const auto rows = detail::get<std::uint32_t>(is, "rows");
  const auto cols = detail::get<std::uint32_t>(is, "cols");
  const Precision prec = precision_from_code(detail::get<std::uint8_t>(is, "precision"));
  Mat<double> m(rows, cols);
  for (double& x : m.flat())
    x = prec == Precision::f32 ? static_cast<double>(detail::get<float>(is, "data")) : detail::get<double>(is, "data");
  return {prec, std::move(m)};
}

template <class T>
Mat<T> read_tensor(std::istream& is) {
  return read_tensor_record(is).values.template cast<T>();
}

template <class T>
void save_tensor(const std::filesystem::path& path, const Mat<T>& m, Precision prec = precision_of<T>()) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail_input("cannot open " + path.string() + " for writing");
  write_tensor(os, m, prec);
}

inline TensorRecord load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail_input("cannot open " + path.string());
  return read_tensor_record(is);
}

}  // namespace vxl::io
