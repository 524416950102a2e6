#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "qpo/common.hpp"
#include "qpo/policy.hpp"

namespace qpo {

// Flat self-describing tensor container: a text manifest line carrying the
// model-config hash, then ordered records of
//   u32 name_len, name, u32 dtype_len, dtype ("f32"), u32 ndim, u64 dims...,
//   row-major little-endian values.

namespace detail {

inline void put_u32(std::ofstream& out, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ofstream& out, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f32(std::ofstream& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

inline uint32_t get_u32(std::ifstream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw ParseError(path, 0, "<binary>", "unexpected end of file");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

inline uint64_t get_u64(std::ifstream& in, const std::string& path) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8))
    throw ParseError(path, 0, "<binary>", "unexpected end of file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void save_checkpoint(PolicyParams<float>& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot open " + path);
  const auto tensors = collect_tensors(params);
  char manifest[128];
  std::snprintf(manifest, sizeof(manifest), "qpo-ckpt v1 config=%016llx tensors=%zu\n",
                static_cast<unsigned long long>(model_config_hash(params.cfg)),
                tensors.size());
  out << manifest;
  for (const auto& t : tensors) {
    detail::put_u32(out, static_cast<uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<long>(t.name.size()));
    detail::put_u32(out, 3);
    out.write("f32", 3);
    detail::put_u32(out, 2);
    detail::put_u64(out, static_cast<uint64_t>(t.rows));
    detail::put_u64(out, static_cast<uint64_t>(t.cols));
    for (long i = 0; i < t.rows * t.cols; ++i) detail::put_f32(out, t.data[i]);
  }
  if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

// Loads into a parameter container shaped by `cfg`; the manifest hash and
// every tensor's name/shape are verified against it.
inline PolicyParams<float> load_checkpoint(const std::string& path, const ModelConfig& cfg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path);
  std::string manifest;
  if (!std::getline(in, manifest))
    throw ParseError(path, 1, "<manifest>", "missing manifest line");
  char expected[128];
  PolicyParams<float> params = zero_params<float>(cfg);
  const auto tensors = collect_tensors(params);
  std::snprintf(expected, sizeof(expected), "qpo-ckpt v1 config=%016llx tensors=%zu",
                static_cast<unsigned long long>(model_config_hash(cfg)), tensors.size());
  if (manifest != expected)
    throw ConfigError("load_checkpoint: manifest '" + manifest +
                      "' does not match the run configuration ('" + expected + "')");

  for (const auto& t : tensors) {
    const uint32_t name_len = detail::get_u32(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len))
      throw ParseError(path, 0, "<name>", "unexpected end of file");
    if (name != t.name)
      throw ParseError(path, 0, name, "expected tensor '" + t.name + "'");
    const uint32_t dtype_len = detail::get_u32(in, path);
    std::string dtype(dtype_len, '\0');
    if (!in.read(dtype.data(), dtype_len))
      throw ParseError(path, 0, name, "unexpected end of file");
    if (dtype != "f32") throw ParseError(path, 0, name, "unsupported dtype " + dtype);
    const uint32_t ndim = detail::get_u32(in, path);
    if (ndim != 2) throw ParseError(path, 0, name, "expected 2 dims");
    const auto rows = static_cast<long>(detail::get_u64(in, path));
    const auto cols = static_cast<long>(detail::get_u64(in, path));
    if (rows != t.rows || cols != t.cols)
      throw ConfigError("load_checkpoint: tensor " + name + " has shape " +
                        std::to_string(rows) + "x" + std::to_string(cols) +
                        ", config expects " + std::to_string(t.rows) + "x" +
                        std::to_string(t.cols));
    for (long i = 0; i < rows * cols; ++i) {
      const uint32_t bits = detail::get_u32(in, path);
      float v;
      std::memcpy(&v, &bits, 4);
      t.data[i] = v;
    }
  }
  return params;
}

}  // namespace qpo
