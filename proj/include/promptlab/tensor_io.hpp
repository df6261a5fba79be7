#pragma once

// Binary tensor files:
//   8-byte magic "PMLTNSR1"
//   u32 LE rank
//   rank x u64 LE extents
//   u8 element width (4 = float32, 8 = float64)
//   raw LE row-major payload

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string_view>

#include "promptlab/tensor.hpp"

namespace promptlab {

inline constexpr std::string_view kTensorMagic = "PMLTNSR1";

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
  }
}

template <typename U>
U get_le(std::string_view in, std::size_t& pos, const std::string& where) {
  if (pos + sizeof(U) > in.size()) throw IoError("truncated tensor file: " + where);
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += sizeof(U);
  return static_cast<U>(v);
}

template <typename F>
void put_float(std::string& out, F v) {
  using Bits = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
  put_le(out, std::bit_cast<Bits>(v));
}

template <typename F>
F get_float(std::string_view in, std::size_t& pos, const std::string& where) {
  using Bits = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
  return std::bit_cast<F>(get_le<Bits>(in, pos, where));
}

/// Shortest decimal text that reads back to the same value.
template <std::floating_point T>
std::string format_real(T v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return data;
}

inline void write_file(const std::filesystem::path& path, std::string_view data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

}  // namespace detail

template <std::floating_point T>
std::string encode_tensor(const Tensor<T>& t) {
  std::string out(kTensorMagic);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) detail::put_le<std::uint64_t>(out, e);
  out.push_back(static_cast<char>(sizeof(T)));
  for (T v : t.flat()) detail::put_float(out, v);
  return out;
}

/// Decodes either element width and converts to T.
template <std::floating_point T>
Tensor<T> decode_tensor(std::string_view in, const std::string& where = "<memory>") {
  if (in.size() < kTensorMagic.size() || in.substr(0, kTensorMagic.size()) != kTensorMagic) {
    throw IoError("bad tensor magic in " + where);
  }
  std::size_t pos = kTensorMagic.size();
  const auto rank = detail::get_le<std::uint32_t>(in, pos, where);
  if (rank > 16) throw IoError("implausible tensor rank in " + where);
  Shape shape(rank);
  for (auto& e : shape) {
    e = detail::get_le<std::uint64_t>(in, pos, where);
    if (e == 0) throw IoError("zero extent in " + where);
  }
  const auto width = detail::get_le<std::uint8_t>(in, pos, where);
  if (width != 4 && width != 8) throw IoError("bad element width in " + where);
  const std::size_t n = shape_numel(shape);
  if (in.size() != pos + n * width) {
    throw IoError(detail::concat("tensor payload size mismatch in ", where, ": expected ",
                                 n * width, " bytes, found ", in.size() - pos));
  }
  std::vector<T> data(n);
  for (auto& v : data) {
    v = width == 4 ? static_cast<T>(detail::get_float<float>(in, pos, where))
                   : static_cast<T>(detail::get_float<double>(in, pos, where));
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

template <std::floating_point T>
void save_tensor(const Tensor<T>& t, const std::filesystem::path& path) {
  detail::write_file(path, encode_tensor(t));
}

template <std::floating_point T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  return decode_tensor<T>(detail::read_file(path), path.string());
}

/// FNV-1a over the encoded bytes; used for bit-level equality checks.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

template <std::floating_point T>
std::uint64_t checksum(const Tensor<T>& t, std::uint64_t h = 1469598103934665603ull) {
  return fnv1a(encode_tensor(t), h);
}

}  // namespace promptlab
