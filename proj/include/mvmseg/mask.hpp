#pragma once

#include <cstdint>
#include <vector>

namespace mvmseg {

/// Binary 2D label image, row-major, values 0/1.
struct Mask {
  int h = 0, w = 0;
  std::vector<std::uint8_t> v;

  Mask() = default;
  Mask(int h_, int w_) : h(h_), w(w_), v(std::size_t(h_) * std::size_t(w_), 0) {}

  std::uint8_t& at(int i, int j) { return v[std::size_t(i) * w + j]; }
  std::uint8_t at(int i, int j) const { return v[std::size_t(i) * w + j]; }

  bool inside(int i, int j) const { return i >= 0 && i < h && j >= 0 && j < w; }

  int area() const {
    int n = 0;
    for (auto x : v) n += (x != 0);
    return n;
  }

  bool operator==(const Mask& o) const { return h == o.h && w == o.w && v == o.v; }
};

}  // namespace mvmseg
