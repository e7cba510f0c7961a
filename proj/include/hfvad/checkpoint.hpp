#pragma once

// "VADT" tensor container:
//   magic "VADT" | version u16 LE | records until EOF
//   record: name length u32 LE | UTF-8 name | rank u8 | dims u32 LE x rank | payload f32 LE
// Used for checkpoints, frame stacks, masks, flows and anomaly maps.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "hfvad/common.hpp"

namespace hfvad::io {

inline constexpr char kMagic[4] = {'V', 'A', 'D', 'T'};
inline constexpr std::uint16_t kVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> values;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class U>
U get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw IoError("truncated VADT container");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(U);
  return v;
}

}  // namespace detail

inline std::string encode(const std::vector<NamedTensor>& tensors) {
  std::string out(kMagic, 4);
  detail::put_le<std::uint16_t>(out, kVersion);
  for (const auto& t : tensors) {
    if (t.shape.size() > 255) throw IoError("tensor rank exceeds 255: " + t.name);
    if (t.numel() != t.values.size()) throw DimensionError("tensor '" + t.name + "' shape/payload mismatch");
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    out.push_back(static_cast<char>(t.shape.size()));
    for (auto d : t.shape) detail::put_le<std::uint32_t>(out, d);
    for (float f : t.values) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline std::vector<NamedTensor> decode(const std::string& bytes) {
  if (bytes.size() < 6 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw IoError("not a VADT container");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint16_t>(bytes, pos);
  if (version != kVersion) throw IoError("unsupported VADT version " + std::to_string(version));
  std::vector<NamedTensor> out;
  while (pos < bytes.size()) {
    NamedTensor t;
    const auto len = detail::get_le<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size()) throw IoError("truncated VADT record name");
    t.name = bytes.substr(pos, len);
    pos += len;
    if (pos >= bytes.size()) throw IoError("truncated VADT record");
    const auto rank = static_cast<unsigned char>(bytes[pos++]);
    for (unsigned i = 0; i < rank; ++i) t.shape.push_back(detail::get_le<std::uint32_t>(bytes, pos));
    const std::size_t n = t.numel();
    if (pos + 4 * n > bytes.size()) throw IoError("truncated VADT payload for '" + t.name + "'");
    t.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) t.values[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, pos));
    out.push_back(std::move(t));
  }
  return out;
}

inline void save(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  write_file(path, encode(tensors));
}

inline std::vector<NamedTensor> load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingPrerequisite("missing tensor file " + path.string());
  return decode(read_file(path));
}

inline const NamedTensor& find(const std::vector<NamedTensor>& tensors, std::string_view name) {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw IoError("tensor '" + std::string(name) + "' not found in container");
}

}  // namespace hfvad::io
