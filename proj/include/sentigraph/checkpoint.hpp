#pragma once

// Parameter checkpoint archive: a versioned header followed by
// name -> shape -> raw little-endian float64 entries.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "sentigraph/tensor.hpp"

namespace sg {

namespace detail {

constexpr char kCkptMagic[8] = {'S', 'G', 'P', 'A', 'R', 'A', 'M', 'S'};
constexpr std::uint32_t kCkptVersion = 1;

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline void write_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  write_u64(os, bits);
}
inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}
inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
inline double read_f64(std::istream& is) {
  std::uint64_t bits = read_u64(is);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace detail

inline void save_checkpoint(const ParamSnapshot& snapshot, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot open " + path + " for writing");
  os.write(detail::kCkptMagic, 8);
  detail::write_u32(os, detail::kCkptVersion);
  detail::write_u64(os, snapshot.size());
  for (const auto& [name, sv] : snapshot) {
    detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(sv.first.size()));
    for (std::size_t d : sv.first) detail::write_u64(os, d);
    for (double v : sv.second) detail::write_f64(os, v);
  }
  if (!os) throw DataError("checkpoint: write failed for " + path);
}

inline void save_checkpoint(const ParamStore& params, const std::string& path) {
  save_checkpoint(params.snapshot(), path);
}

inline ParamSnapshot load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw DataError("checkpoint: " + path + " is not a parameter archive");
  const std::uint32_t version = detail::read_u32(is);
  if (version != detail::kCkptVersion)
    throw DataError("checkpoint: " + path + " has format version " + std::to_string(version) +
                    ", expected " + std::to_string(detail::kCkptVersion));
  const std::uint64_t count = detail::read_u64(is);
  ParamSnapshot snapshot;
  snapshot.reserve(count);
  for (std::uint64_t e = 0; e < count; ++e) {
    const std::uint32_t name_len = detail::read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const std::uint32_t rank = detail::read_u32(is);
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_u64(is);
    std::vector<double> data(shape_size(shape));
    for (auto& v : data) v = detail::read_f64(is);
    if (!is) throw DataError("checkpoint: truncated archive " + path);
    snapshot.emplace_back(std::move(name), std::pair{std::move(shape), std::move(data)});
  }
  return snapshot;
}

}  // namespace sg
