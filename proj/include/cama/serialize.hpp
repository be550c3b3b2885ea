#pragma once

// CAMT tensor format (little-endian):
//   "CAMT" | u8 dtype (0 = f32, 1 = f64) | u8 rank | u64 extents[rank] | raw scalars

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "cama/errors.hpp"
#include "cama/tensor.hpp"

namespace cama {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written with native little-endian stores");

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename Scalar>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
  return std::is_same_v<Scalar, float> ? DType::f32 : DType::f64;
}

namespace io {

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("unexpected end of stream");
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), n)) throw FormatError("unexpected end of stream in string");
  return s;
}

}  // namespace io

template <typename Scalar>
void write_tensor(std::ostream& os, const Tensor<Scalar>& t) {
  os.write("CAMT", 4);
  io::put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<Scalar>()));
  io::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (Index e : t.shape()) io::put<std::uint64_t>(os, static_cast<std::uint64_t>(e));
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.data().size() * sizeof(Scalar)));
}

/// Reads one CAMT record; values stored at the other precision are converted.
template <typename Scalar>
Tensor<Scalar> read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "CAMT", 4) != 0) throw FormatError("missing CAMT magic");
  const auto tag = io::get<std::uint8_t>(is);
  if (tag > 1) throw FormatError("unknown CAMT dtype tag " + std::to_string(tag));
  const auto rank = io::get<std::uint8_t>(is);
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<Index>(io::get<std::uint64_t>(is));
  const auto n = static_cast<std::size_t>(numel_of(shape));
  auto read_as = [&](auto tag_value) {
    using Stored = decltype(tag_value);
    std::vector<Stored> raw(n);
    if (n > 0 && !is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(Stored)))) {
      throw FormatError("truncated CAMT payload");
    }
    return std::vector<Scalar>(raw.begin(), raw.end());
  };
  auto data = static_cast<DType>(tag) == DType::f32 ? read_as(float{}) : read_as(double{});
  return Tensor<Scalar>(std::move(shape), std::move(data));
}

}  // namespace cama
