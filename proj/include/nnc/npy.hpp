#pragma once

// NPY v1.0 reader/writer. Little-endian, C order only.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nnc/tensor.hpp"

namespace nnc {

class NpyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct NpyDtype;
template <>
struct NpyDtype<float> {
  static constexpr const char* descr = "<f4";
};
template <>
struct NpyDtype<double> {
  static constexpr const char* descr = "<f8";
};
template <>
struct NpyDtype<std::uint8_t> {
  static constexpr const char* descr = "|u1";
};
template <>
struct NpyDtype<std::uint16_t> {
  static constexpr const char* descr = "<u2";
};
template <>
struct NpyDtype<std::int32_t> {
  static constexpr const char* descr = "<i4";
};
template <>
struct NpyDtype<std::int64_t> {
  static constexpr const char* descr = "<i8";
};

static_assert(std::endian::native == std::endian::little, "NPY I/O assumes a little-endian host");

struct NpyArray {
  std::string descr;
  Shape shape;
  std::vector<char> bytes;

  std::size_t count() const { return numel(shape); }

  /// Element-wise conversion from any supported stored dtype.
  template <typename U>
  std::vector<U> as() const {
    std::vector<U> out(count());
    auto conv = [&]<typename S>() {
      if (bytes.size() != out.size() * sizeof(S)) throw NpyError("npy: payload size does not match shape");
      for (std::size_t i = 0; i < out.size(); ++i) {
        S v;
        std::memcpy(&v, bytes.data() + i * sizeof(S), sizeof(S));
        out[i] = static_cast<U>(v);
      }
    };
    if (descr == "<f4") conv.template operator()<float>();
    else if (descr == "<f8") conv.template operator()<double>();
    else if (descr == "|u1" || descr == "<u1") conv.template operator()<std::uint8_t>();
    else if (descr == "|b1") conv.template operator()<std::uint8_t>();
    else if (descr == "<u2") conv.template operator()<std::uint16_t>();
    else if (descr == "<i2") conv.template operator()<std::int16_t>();
    else if (descr == "<i4") conv.template operator()<std::int32_t>();
    else if (descr == "<u4") conv.template operator()<std::uint32_t>();
    else if (descr == "<i8") conv.template operator()<std::int64_t>();
    else throw NpyError("npy: unsupported dtype '" + descr + "'");
    return out;
  }
};

namespace detail {

inline std::string npy_header(const std::string& descr, const Shape& shape) {
  std::string dict = "{'descr': '" + descr + "', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    dict += std::to_string(shape[i]);
    if (shape.size() == 1 || i + 1 < shape.size()) dict += ",";
    if (i + 1 < shape.size()) dict += " ";
  }
  dict += "), }";
  const std::size_t preamble = 10;  // magic(6) + version(2) + len(2)
  std::size_t total = preamble + dict.size() + 1;
  const std::size_t pad = (64 - total % 64) % 64;
  dict.append(pad, ' ');
  dict += '\n';
  std::string out = "\x93NUMPY";
  out += '\x01';
  out += '\x00';
  const auto len = static_cast<std::uint16_t>(dict.size());
  out += static_cast<char>(len & 0xff);
  out += static_cast<char>(len >> 8);
  out += dict;
  return out;
}

inline std::string dict_value(const std::string& header, const std::string& key) {
  const auto k = header.find("'" + key + "'");
  if (k == std::string::npos) throw NpyError("npy: header lacks '" + key + "'");
  auto colon = header.find(':', k);
  if (colon == std::string::npos) throw NpyError("npy: malformed header");
  std::size_t i = colon + 1;
  while (i < header.size() && header[i] == ' ') ++i;
  if (header[i] == '\'') {
    const auto end = header.find('\'', i + 1);
    return header.substr(i + 1, end - i - 1);
  }
  if (header[i] == '(') {
    const auto end = header.find(')', i);
    return header.substr(i + 1, end - i - 1);
  }
  const auto end = header.find_first_of(",}", i);
  return header.substr(i, end - i);
}

}  // namespace detail

inline NpyArray read_npy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NpyError("npy: cannot open " + path.string());
  char magic[6];
  in.read(magic, 6);
  if (!in || std::memcmp(magic, "\x93NUMPY", 6) != 0) throw NpyError("npy: bad magic in " + path.string());
  unsigned char ver[2];
  in.read(reinterpret_cast<char*>(ver), 2);
  std::uint32_t hlen = 0;
  if (ver[0] == 1) {
    unsigned char l[2];
    in.read(reinterpret_cast<char*>(l), 2);
    hlen = l[0] | (l[1] << 8);
  } else if (ver[0] == 2 || ver[0] == 3) {
    unsigned char l[4];
    in.read(reinterpret_cast<char*>(l), 4);
    hlen = l[0] | (l[1] << 8) | (l[2] << 16) | (std::uint32_t(l[3]) << 24);
  } else {
    throw NpyError("npy: unsupported version in " + path.string());
  }
  std::string header(hlen, '\0');
  in.read(header.data(), hlen);
  if (!in) throw NpyError("npy: truncated header in " + path.string());

  NpyArray arr;
  arr.descr = detail::dict_value(header, "descr");
  if (detail::dict_value(header, "fortran_order").find("True") != std::string::npos) {
    throw NpyError("npy: Fortran-ordered arrays are not supported (" + path.string() + ")");
  }
  const std::string shape = detail::dict_value(header, "shape");
  std::size_t pos = 0;
  while (pos < shape.size()) {
    while (pos < shape.size() && (shape[pos] == ' ' || shape[pos] == ',')) ++pos;
    if (pos >= shape.size()) break;
    std::size_t used = 0;
    arr.shape.push_back(std::stoull(shape.substr(pos), &used));
    pos += used;
  }
  std::size_t item = 0;
  const char kind = arr.descr.size() >= 3 ? arr.descr[1] : '?';
  if (arr.descr.size() >= 3) item = std::stoul(arr.descr.substr(2));
  if (arr.descr[0] == '>' && item > 1) throw NpyError("npy: big-endian data not supported (" + path.string() + ")");
  if (kind != 'f' && kind != 'u' && kind != 'i' && kind != 'b') throw NpyError("npy: unsupported dtype " + arr.descr);
  arr.bytes.resize(arr.count() * item);
  in.read(arr.bytes.data(), static_cast<std::streamsize>(arr.bytes.size()));
  if (!in) throw NpyError("npy: truncated payload in " + path.string());
  return arr;
}

template <typename T>
void write_npy(const std::filesystem::path& path, const Shape& shape, std::span<const T> data) {
  if (numel(shape) != data.size()) throw NpyError("npy: data length does not match shape");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw NpyError("npy: cannot write " + path.string());
  const std::string header = detail::npy_header(NpyDtype<T>::descr, shape);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)));
  if (!out) throw NpyError("npy: write failed for " + path.string());
}

template <typename T>
void write_npy(const std::filesystem::path& path, const Tensor<T>& t) {
  write_npy<T>(path, t.shape(), t.data());
}

template <typename T>
Tensor<T> read_npy_tensor(const std::filesystem::path& path) {
  NpyArray a = read_npy(path);
  return Tensor<T>(a.shape, a.as<T>());
}

}  // namespace nnc
