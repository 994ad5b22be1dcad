#pragma once

// TLT1 binary tensor files.
//
//   bytes 0..3   "TLT1"
//   header       compact JSON {"byte_order":"little","dtype":..,"shape":[..]},
//                space padded and terminated by '\n' so that the payload
//                starts on a 64-byte boundary
//   payload      row-major elements, little endian
//
// Supported dtypes: f64 (default), f32 and u8. u8 stores values rounded and
// clamped to [0, 255]; decoding returns them as doubles in that range.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tloc/error.hpp"
#include "tloc/tensor.hpp"

namespace tloc {

enum class Dtype { F64, F32, U8 };

inline const char* dtype_name(Dtype d) {
  switch (d) {
    case Dtype::F64: return "f64";
    case Dtype::F32: return "f32";
    case Dtype::U8: return "u8";
  }
  return "?";
}

inline Dtype parse_dtype(const std::string& s) {
  if (s == "f64") return Dtype::F64;
  if (s == "f32") return Dtype::F32;
  if (s == "u8") return Dtype::U8;
  throw FormatError("unknown TLT1 dtype '" + s + "'");
}

namespace detail {

constexpr std::array<char, 4> kTltMagic{'T', 'L', 'T', '1'};
constexpr std::size_t kTltAlign = 64;

template <typename T>
void put_le(std::vector<char>& out, T v) {
  std::array<char, sizeof(T)> b;
  std::memcpy(b.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  out.insert(out.end(), b.begin(), b.end());
}

template <typename T>
T get_le(const char* p) {
  std::array<char, sizeof(T)> b;
  std::memcpy(b.data(), p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  T v;
  std::memcpy(&v, b.data(), sizeof(T));
  return v;
}

inline std::size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::F64: return 8;
    case Dtype::F32: return 4;
    case Dtype::U8: return 1;
  }
  return 0;
}

}  // namespace detail

inline std::vector<char> encode_tensor(const Tensor& t, Dtype dtype = Dtype::F64) {
  if (t.empty()) throw ContractError("cannot encode an empty tensor");
  nlohmann::json header{{"dtype", dtype_name(dtype)}, {"shape", t.shape()}, {"byte_order", "little"}};
  std::string h = header.dump();
  std::size_t used = detail::kTltMagic.size() + h.size() + 1;
  std::size_t pad = (detail::kTltAlign - used % detail::kTltAlign) % detail::kTltAlign;
  h.append(pad, ' ');
  h.push_back('\n');

  const std::size_t head = detail::kTltMagic.size() + h.size();
  std::vector<char> out(head);
  out.reserve(head + t.size() * detail::dtype_size(dtype));
  std::memcpy(out.data(), detail::kTltMagic.data(), detail::kTltMagic.size());
  std::memcpy(out.data() + detail::kTltMagic.size(), h.data(), h.size());
  for (double v : t.data()) {
    switch (dtype) {
      case Dtype::F64: detail::put_le<double>(out, v); break;
      case Dtype::F32: detail::put_le<float>(out, static_cast<float>(v)); break;
      case Dtype::U8:
        out.push_back(static_cast<char>(static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0))));
        break;
    }
  }
  return out;
}

inline Tensor decode_tensor(const std::vector<char>& bytes) {
  if (bytes.size() < detail::kTltAlign ||
      !std::equal(detail::kTltMagic.begin(), detail::kTltMagic.end(), bytes.begin())) {
    throw FormatError("missing TLT1 magic");
  }
  auto nl = std::find(bytes.begin() + 4, bytes.end(), '\n');
  if (nl == bytes.end()) throw FormatError("unterminated TLT1 header");
  const std::size_t payload_at = static_cast<std::size_t>(nl - bytes.begin()) + 1;
  if (payload_at % detail::kTltAlign != 0) throw FormatError("TLT1 payload not 64-byte aligned");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 4, nl);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad TLT1 header: ") + e.what());
  }
  if (header.value("byte_order", "") != "little") throw FormatError("TLT1 byte order must be little");
  const Dtype dtype = parse_dtype(header.at("dtype").get<std::string>());
  Shape shape = header.at("shape").get<Shape>();
  const std::size_t n = shape_numel(shape);
  const std::size_t es = detail::dtype_size(dtype);
  if (bytes.size() != payload_at + n * es) throw FormatError("TLT1 payload size mismatch");

  std::vector<double> data(n);
  const char* p = bytes.data() + payload_at;
  for (std::size_t i = 0; i < n; ++i, p += es) {
    switch (dtype) {
      case Dtype::F64: data[i] = detail::get_le<double>(p); break;
      case Dtype::F32: data[i] = detail::get_le<float>(p); break;
      case Dtype::U8: data[i] = static_cast<std::uint8_t>(*p); break;
    }
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t, Dtype dtype = Dtype::F64) {
  const auto bytes = encode_tensor(t, dtype);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed: " + path.string());
}

inline std::vector<char> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  try {
    return decode_tensor(read_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace tloc
