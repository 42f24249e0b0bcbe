#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "erlab/tensor.hpp"

namespace erlab::checkpoint {

// Binary tensor container. Layout, all integers 64-bit little-endian:
//   "ERLB1\n"
//   repeat until EOF: name_len, name bytes (UTF-8), rank, dims..., f32 data
constexpr char kMagic[] = "ERLB1\n";

namespace detail {

inline void put_u64(std::ostream& os, uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = (unsigned char)((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), 8);
}

inline uint64_t get_u64(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(buf[i]) << (8 * i);
  return v;
}

inline void put_f32(std::ostream& os, std::span<const float> data) {
  for (float f : data) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    unsigned char buf[4] = {(unsigned char)(bits & 0xff), (unsigned char)((bits >> 8) & 0xff),
                            (unsigned char)((bits >> 16) & 0xff),
                            (unsigned char)((bits >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(buf), 4);
  }
}

inline void get_f32(std::istream& is, std::span<float> data) {
  std::vector<unsigned char> buf(data.size() * 4);
  is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
  for (size_t i = 0; i < data.size(); ++i) {
    const uint32_t bits = uint32_t(buf[4 * i]) | uint32_t(buf[4 * i + 1]) << 8 |
                          uint32_t(buf[4 * i + 2]) << 16 | uint32_t(buf[4 * i + 3]) << 24;
    std::memcpy(&data[i], &bits, 4);
  }
}

}  // namespace detail

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void save_tensors(const std::string& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  os.write(kMagic, 6);
  for (const auto& [name, t] : tensors) {
    detail::put_u64(os, name.size());
    os.write(name.data(), std::streamsize(name.size()));
    detail::put_u64(os, uint64_t(t.rank()));
    for (int i = 0; i < t.rank(); ++i) detail::put_u64(os, uint64_t(t.dim(i)));
    detail::put_f32(os, t.data());
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline NamedTensors load_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[6];
  is.read(magic, 6);
  if (!is || std::memcmp(magic, kMagic, 6) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  NamedTensors out;
  while (true) {
    const uint64_t name_len = detail::get_u64(is);
    if (is.eof()) break;
    if (!is || name_len > (1u << 16))
      throw std::runtime_error("checkpoint: corrupt record in " + path);
    std::string name(name_len, '\0');
    is.read(name.data(), std::streamsize(name_len));
    const uint64_t rank = detail::get_u64(is);
    if (!is || rank == 0 || rank > 8)
      throw std::runtime_error("checkpoint: corrupt rank in " + path);
    Shape shape(rank);
    for (auto& d : shape) d = int(detail::get_u64(is));
    Tensor t = Tensor::zeros(shape);
    detail::get_f32(is, t.data());
    if (!is) throw std::runtime_error("checkpoint: truncated data in " + path);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

// Copies data from `loaded` into the matching names of `dest`, shape-checked.
// Every destination tensor must be present.
inline void restore_into(const NamedTensors& loaded, const NamedTensors& dest,
                         const std::string& context) {
  for (const auto& [name, t] : dest) {
    const Tensor* src = nullptr;
    for (const auto& [lname, lt] : loaded)
      if (lname == name) {
        src = &lt;
        break;
      }
    if (src == nullptr) throw std::runtime_error(context + ": missing tensor " + name);
    if (src->shape() != t.shape())
      throw std::runtime_error(context + ": tensor " + name + " has shape " +
                               shape_str(src->shape()) + ", expected " + shape_str(t.shape()));
    Tensor& mut = const_cast<Tensor&>(t);
    std::copy(src->data().begin(), src->data().end(), mut.data().begin());
  }
}

}  // namespace erlab::checkpoint
