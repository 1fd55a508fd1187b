#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "biobridge/tensor.hpp"

namespace bb {

// Named parameter store. std::map keeps iteration name-sorted, which fixes
// the byte order of checkpoints and fingerprints.
struct ParamRegistry {
  std::map<std::string, TensorPtr> params;

  TensorPtr create(const std::string& name, Shape shape) {
    auto t = make_tensor(std::move(shape), true);
    if (!params.emplace(name, t).second)
      throw std::invalid_argument("ParamRegistry: duplicate parameter \"" + name + "\"");
    return t;
  }

  TensorPtr at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end())
      throw std::invalid_argument("ParamRegistry: no parameter \"" + name + "\"");
    return it->second;
  }

  void zero_grads() {
    for (auto& [name, t] : params) t->zero_grad();
  }

  std::vector<std::pair<std::string, TensorPtr>> with_prefix(const std::string& prefix) const {
    std::vector<std::pair<std::string, TensorPtr>> out;
    for (const auto& [name, t] : params)
      if (name.rfind(prefix, 0) == 0) out.emplace_back(name, t);
    return out;
  }
};

namespace detail {

inline void fnv_bytes(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
}

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw std::invalid_argument("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8))
    throw std::invalid_argument("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& in) {
  const std::uint64_t bits = get_u64(in);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace detail

// FNV-1a over names, shapes, and value bit patterns, in name order.
inline std::uint64_t fingerprint(const ParamRegistry& reg, const std::string& prefix = "") {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& [name, t] : reg.params) {
    if (name.rfind(prefix, 0) != 0) continue;
    detail::fnv_bytes(h, name.data(), name.size());
    for (auto dim : t->shape) {
      const std::uint64_t d64 = dim;
      detail::fnv_bytes(h, &d64, 8);
    }
    for (double v : t->values) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      detail::fnv_bytes(h, &bits, 8);
    }
  }
  return h;
}

inline void save_checkpoint(const std::string& path, const ParamRegistry& reg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << "bb-ckpt-1\n";
  detail::put_u64(out, reg.params.size());
  for (const auto& [name, t] : reg.params) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(t->shape.size()));
    for (auto dim : t->shape) detail::put_u64(out, dim);
    for (double v : t->values) detail::put_f64(out, v);
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline std::map<std::string, TensorPtr> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string magic;
  if (!std::getline(in, magic) || magic != "bb-ckpt-1")
    throw std::invalid_argument("load_checkpoint: bad magic in " + path);
  const std::uint64_t count = detail::get_u64(in);
  std::map<std::string, TensorPtr> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = detail::get_u32(in);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len))
      throw std::invalid_argument("checkpoint: truncated file");
    const std::uint32_t ndim = detail::get_u32(in);
    Shape shape(ndim);
    for (auto& dim : shape) dim = detail::get_u64(in);
    auto t = make_tensor(shape);
    for (auto& v : t->values) v = detail::get_f64(in);
    if (!out.emplace(name, t).second)
      throw std::invalid_argument("load_checkpoint: duplicate parameter \"" + name + "\"");
  }
  return out;
}

// Copies checkpoint values into an already-built registry. Every registry
// parameter must be present with a matching shape.
inline void restore_params(ParamRegistry& reg, const std::map<std::string, TensorPtr>& loaded) {
  for (auto& [name, t] : reg.params) {
    auto it = loaded.find(name);
    if (it == loaded.end())
      throw std::invalid_argument("restore_params: checkpoint is missing \"" + name + "\"");
    if (it->second->shape != t->shape)
      throw std::invalid_argument("restore_params: shape mismatch for \"" + name + "\": " +
                                  shape_str(t->shape) + " vs " + shape_str(it->second->shape));
    t->values = it->second->values;
  }
}

}  // namespace bb
