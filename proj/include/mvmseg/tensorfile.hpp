#pragma once

#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mvmseg/mask.hpp"
#include "mvmseg/tensor.hpp"

namespace mvmseg {

/// Binary array container: magic "MVMT", version byte (=1), dtype byte
/// (0 = float32, 1 = uint8), rank byte, little-endian u32 extents, then the
/// row-major little-endian payload. Archives repeat a length-prefixed UTF-8
/// name followed by one such record.
struct TensorRecord {
  std::uint8_t dtype = 0;  // 0 = float32, 1 = uint8
  std::vector<int> shape;
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;

  std::size_t count() const {
    std::size_t n = 1;
    for (int e : shape) n *= std::size_t(e);
    return n;
  }
};

namespace tensorfile_detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("tensor file: truncated u32");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float f) {
  std::uint32_t v;
  static_assert(sizeof(v) == sizeof(f));
  __builtin_memcpy(&v, &f, 4);
  put_u32(os, v);
}

inline float get_f32(std::istream& is) {
  const std::uint32_t v = get_u32(is);
  float f;
  __builtin_memcpy(&f, &v, 4);
  return f;
}

}  // namespace tensorfile_detail

inline void write_record(std::ostream& os, const TensorRecord& r) {
  os.write("MVMT", 4);
  os.put(char(1));  // format version
  os.put(char(r.dtype));
  os.put(char(r.shape.size()));
  for (int e : r.shape) tensorfile_detail::put_u32(os, std::uint32_t(e));
  if (r.dtype == 0) {
    if (r.f32.size() != r.count()) throw std::invalid_argument("write_record: f32 payload length mismatch");
    for (float f : r.f32) tensorfile_detail::put_f32(os, f);
  } else if (r.dtype == 1) {
    if (r.u8.size() != r.count()) throw std::invalid_argument("write_record: u8 payload length mismatch");
    os.write(reinterpret_cast<const char*>(r.u8.data()), std::streamsize(r.u8.size()));
  } else {
    throw std::invalid_argument("write_record: unknown dtype code " + std::to_string(int(r.dtype)));
  }
  if (!os) throw std::runtime_error("write_record: stream failure");
}

inline TensorRecord read_record(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "MVMT") throw std::runtime_error("tensor file: bad magic");
  const int version = is.get();
  if (version != 1) throw std::runtime_error("tensor file: unsupported format version " + std::to_string(version));
  const int dtype = is.get();
  const int rank = is.get();
  if (dtype < 0 || dtype > 1) throw std::runtime_error("tensor file: unknown dtype code " + std::to_string(dtype));
  if (rank < 0 || rank > 8) throw std::runtime_error("tensor file: implausible rank " + std::to_string(rank));
  TensorRecord r;
  r.dtype = std::uint8_t(dtype);
  for (int i = 0; i < rank; ++i) r.shape.push_back(int(tensorfile_detail::get_u32(is)));
  const std::size_t n = r.count();
  if (r.dtype == 0) {
    r.f32.resize(n);
    for (std::size_t k = 0; k < n; ++k) r.f32[k] = tensorfile_detail::get_f32(is);
  } else {
    r.u8.resize(n);
    is.read(reinterpret_cast<char*>(r.u8.data()), std::streamsize(n));
    if (!is) throw std::runtime_error("tensor file: truncated payload");
  }
  return r;
}

inline TensorRecord to_record(const Tensor<float>& t) {
  TensorRecord r;
  r.dtype = 0;
  r.shape = t.shape();
  r.f32.assign(t.vec().begin(), t.vec().end());
  return r;
}

inline TensorRecord to_record(const std::vector<Mask>& masks) {
  TensorRecord r;
  r.dtype = 1;
  const int T = int(masks.size());
  if (T == 0) throw std::invalid_argument("to_record: empty mask sequence");
  r.shape = {T, masks[0].h, masks[0].w};
  r.u8.reserve(std::size_t(T) * masks[0].v.size());
  for (const auto& m : masks) r.u8.insert(r.u8.end(), m.v.begin(), m.v.end());
  return r;
}

inline Tensor<float> record_to_tensor(const TensorRecord& r) {
  if (r.dtype != 0) throw std::runtime_error("record_to_tensor: record is not float32");
  return Tensor<float>::from(r.shape, r.f32);
}

inline std::vector<Mask> record_to_masks(const TensorRecord& r) {
  if (r.dtype != 1 || r.shape.size() != 3) throw std::runtime_error("record_to_masks: record is not a [T,H,W] uint8 stack");
  std::vector<Mask> out;
  const int T = r.shape[0], H = r.shape[1], W = r.shape[2];
  for (int t = 0; t < T; ++t) {
    Mask m(H, W);
    std::copy(r.u8.begin() + std::ptrdiff_t(std::size_t(t) * H * W), r.u8.begin() + std::ptrdiff_t(std::size_t(t + 1) * H * W),
              m.v.begin());
    out.push_back(std::move(m));
  }
  return out;
}

using NamedRecords = std::vector<std::pair<std::string, TensorRecord>>;

inline void write_archive(const std::string& path, const NamedRecords& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_archive: cannot open " + path);
  for (const auto& [name, rec] : records) {
    tensorfile_detail::put_u32(os, std::uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    write_record(os, rec);
  }
  if (!os) throw std::runtime_error("write_archive: write failure on " + path);
}

inline NamedRecords read_archive(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_archive: cannot open " + path);
  NamedRecords out;
  while (true) {
    is.peek();
    if (is.eof()) break;
    const std::uint32_t len = tensorfile_detail::get_u32(is);
    if (len > (1u << 20)) throw std::runtime_error("read_archive: implausible name length");
    std::string name(len, '\0');
    is.read(name.data(), std::streamsize(len));
    if (!is) throw std::runtime_error("read_archive: truncated name");
    out.push_back({std::move(name), read_record(is)});
  }
  return out;
}

}  // namespace mvmseg
