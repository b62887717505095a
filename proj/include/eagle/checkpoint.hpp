#pragma once

// Flat binary checkpoint. All integers are unsigned little-endian, all
// floating-point values are IEEE-754 binary64 little-endian.
//
//   magic        8 bytes  "EAGLECKP"
//   version      u32      (= 1)
//   digest       u64      FNV-1a 64 of the config bytes below
//   config_len   u64
//   config       config_len bytes of UTF-8 JSON
//   n_arrays     u64
//   per array:   name_len u64, name bytes, rank u64, dims u64[rank], f64[numel]
//   adam_t       u64
//   per array:   f64[numel] first moment, then f64[numel] second moment
//
// Arrays appear in EagleModel::parameters() order.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "eagle/adam.hpp"
#include "eagle/errors.hpp"
#include "eagle/tensor.hpp"

namespace eagle {

inline constexpr std::array<char, 8> kCheckpointMagic = {'E', 'A', 'G', 'L', 'E', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 8);
}

inline void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 4);
}

inline void put_f64(std::ostream& out, double x) {
  std::uint64_t bits;
  std::memcpy(&bits, &x, sizeof bits);
  put_u64(out, bits);
}

inline void read_exact(std::istream& in, char* dst, std::size_t n) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw ValidationError("checkpoint: truncated file");
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  read_exact(in, reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  read_exact(in, reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& in) {
  const std::uint64_t bits = get_u64(in);
  double x;
  std::memcpy(&x, &bits, sizeof x);
  return x;
}

}  // namespace detail

struct CheckpointArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::string config_json;
  std::vector<CheckpointArray> arrays;
  AdamState adam;
};

inline void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  using namespace detail;
  if (ckpt.adam.m.size() != ckpt.arrays.size() || ckpt.adam.v.size() != ckpt.arrays.size())
    throw ValidationError("checkpoint: optimizer state does not match parameter list");
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  put_u32(out, kCheckpointVersion);
  put_u64(out, fnv1a64(ckpt.config_json));
  put_u64(out, ckpt.config_json.size());
  out.write(ckpt.config_json.data(), static_cast<std::streamsize>(ckpt.config_json.size()));
  put_u64(out, ckpt.arrays.size());
  for (const auto& a : ckpt.arrays) {
    if (numel(a.shape) != a.values.size()) throw DimensionError("checkpoint: array " + a.name + " shape/data mismatch");
    put_u64(out, a.name.size());
    out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    put_u64(out, a.shape.size());
    for (auto d : a.shape) put_u64(out, d);
    for (double x : a.values) put_f64(out, x);
  }
  put_u64(out, static_cast<std::uint64_t>(ckpt.adam.t));
  for (std::size_t i = 0; i < ckpt.arrays.size(); ++i) {
    if (ckpt.adam.m[i].size() != ckpt.arrays[i].values.size() ||
        ckpt.adam.v[i].size() != ckpt.arrays[i].values.size())
      throw DimensionError("checkpoint: optimizer moment size mismatch for " + ckpt.arrays[i].name);
    for (double x : ckpt.adam.m[i]) put_f64(out, x);
    for (double x : ckpt.adam.v[i]) put_f64(out, x);
  }
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& in) {
  using namespace detail;
  std::array<char, 8> magic{};
  read_exact(in, magic.data(), magic.size());
  if (magic != kCheckpointMagic) throw ValidationError("checkpoint: bad magic bytes");
  const auto version = get_u32(in);
  if (version != kCheckpointVersion)
    throw ValidationError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  const auto digest = get_u64(in);
  const auto config_len = get_u64(in);
  if (config_len > (1ULL << 30)) throw ValidationError("checkpoint: implausible config length");
  ckpt.config_json.resize(config_len);
  read_exact(in, ckpt.config_json.data(), config_len);
  if (fnv1a64(ckpt.config_json) != digest) throw ValidationError("checkpoint: config digest mismatch");
  const auto n = get_u64(in);
  for (std::uint64_t i = 0; i < n; ++i) {
    CheckpointArray a;
    const auto name_len = get_u64(in);
    if (name_len > 4096) throw ValidationError("checkpoint: implausible array name length");
    a.name.resize(name_len);
    read_exact(in, a.name.data(), name_len);
    const auto rank = get_u64(in);
    if (rank > 8) throw ValidationError("checkpoint: implausible rank for " + a.name);
    for (std::uint64_t r = 0; r < rank; ++r) a.shape.push_back(get_u64(in));
    a.values.resize(numel(a.shape));
    for (auto& x : a.values) x = get_f64(in);
    ckpt.arrays.push_back(std::move(a));
  }
  ckpt.adam.t = static_cast<std::int64_t>(get_u64(in));
  for (const auto& a : ckpt.arrays) {
    std::vector<double> m(a.values.size()), v(a.values.size());
    for (auto& x : m) x = get_f64(in);
    for (auto& x : v) x = get_f64(in);
    ckpt.adam.m.push_back(std::move(m));
    ckpt.adam.v.push_back(std::move(v));
  }
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_checkpoint(out, ckpt);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

}  // namespace eagle
