#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mvmseg/ellipse.hpp"
#include "mvmseg/mask.hpp"

namespace mvmseg {

/// Segmentation has no usable inner/outer structure (e.g. a filled disk or
/// an empty mask); the caller may fall back to an earlier frame.
struct DegenerateMask : std::runtime_error {
  explicit DegenerateMask(const std::string& msg) : std::runtime_error(msg) {}
};

/// A frame could not be repaired and no earlier frame is available.
struct Unrecoverable : std::runtime_error {
  explicit Unrecoverable(const std::string& msg) : std::runtime_error(msg) {}
};

namespace postproc_detail {

// 4-connected flood fill over pixels matching `value`, seeded from (si,sj);
// writes `label` into lab.
inline void flood4(const Mask& m, std::vector<int>& lab, int si, int sj, int label, std::uint8_t value) {
  std::vector<std::pair<int, int>> stack{{si, sj}};
  lab[std::size_t(si) * m.w + sj] = label;
  while (!stack.empty()) {
    auto [i, j] = stack.back();
    stack.pop_back();
    const int di[4] = {-1, 1, 0, 0}, dj[4] = {0, 0, -1, 1};
    for (int d = 0; d < 4; ++d) {
      const int ni = i + di[d], nj = j + dj[d];
      if (ni < 0 || ni >= m.h || nj < 0 || nj >= m.w) continue;
      const std::size_t k = std::size_t(ni) * m.w + nj;
      if (m.v[k] != value || lab[k] != 0) continue;
      lab[k] = label;
      stack.push_back({ni, nj});
    }
  }
}

}  // namespace postproc_detail

/// Keeps only the largest 4-connected foreground component; ties go to the
/// component whose seed pixel comes first in scan order. An empty mask
/// passes through empty.
inline Mask largest_component(const Mask& m) {
  std::vector<int> lab(m.v.size(), 0);
  int next = 0, best_label = 0, best_size = 0;
  std::vector<int> sizes{0};
  for (int i = 0; i < m.h; ++i)
    for (int j = 0; j < m.w; ++j) {
      if (!m.at(i, j) || lab[std::size_t(i) * m.w + j] != 0) continue;
      postproc_detail::flood4(m, lab, i, j, ++next, 1);
      int sz = 0;
      for (std::size_t k = 0; k < lab.size(); ++k) sz += lab[k] == next;
      sizes.push_back(sz);
      if (sz > best_size) {  // strict: earlier seed wins ties
        best_size = sz;
        best_label = next;
      }
    }
  Mask out(m.h, m.w);
  if (best_label != 0)
    for (std::size_t k = 0; k < lab.size(); ++k) out.v[k] = lab[k] == best_label ? 1 : 0;
  return out;
}

struct Boundaries {
  std::vector<Point> outer;  // foreground 4-adjacent to the unbounded background
  std::vector<Point> inner;  // foreground 4-adjacent to the enclosed hole
};

/// Boundary pixels of an annulus-like mask, pixel-center coordinates
/// (x = column, y = row). The hole is located by flood fill from the
/// foreground centroid; a mask whose centroid lands on foreground (filled
/// disk) or that is empty signals DegenerateMask. For a broken (open) ring
/// the centroid flood merges with the outside, in which case both lists
/// cover the whole boundary and downstream fits see every boundary point.
inline Boundaries extract_boundaries(const Mask& m) {
  long sum_i = 0, sum_j = 0, n = 0;
  for (int i = 0; i < m.h; ++i)
    for (int j = 0; j < m.w; ++j)
      if (m.at(i, j)) {
        sum_i += i;
        sum_j += j;
        ++n;
      }
  if (n == 0) throw DegenerateMask("extract_boundaries: empty mask");

  // background region touching the border = unbounded outside
  std::vector<int> bg(m.v.size(), 0);
  for (int i = 0; i < m.h; ++i)
    for (int j : {0, m.w - 1})
      if (!m.at(i, j) && bg[std::size_t(i) * m.w + j] == 0) postproc_detail::flood4(m, bg, i, j, 1, 0);
  for (int j = 0; j < m.w; ++j)
    for (int i : {0, m.h - 1})
      if (!m.at(i, j) && bg[std::size_t(i) * m.w + j] == 0) postproc_detail::flood4(m, bg, i, j, 1, 0);

  const int ci = int(std::lround(double(sum_i) / n)), cj = int(std::lround(double(sum_j) / n));
  if (!m.inside(ci, cj) || m.at(ci, cj))
    throw DegenerateMask("extract_boundaries: no hole (centroid pixel is foreground)");
  if (bg[std::size_t(ci) * m.w + cj] == 0) postproc_detail::flood4(m, bg, ci, cj, 2, 0);
  const int hole_label = bg[std::size_t(ci) * m.w + cj];  // 2 = enclosed, 1 = merged with outside

  Boundaries out;
  const int di[4] = {-1, 1, 0, 0}, dj[4] = {0, 0, -1, 1};
  for (int i = 0; i < m.h; ++i)
    for (int j = 0; j < m.w; ++j) {
      if (!m.at(i, j)) continue;
      bool touches_outside = false, touches_hole = false;
      for (int d = 0; d < 4; ++d) {
        const int ni = i + di[d], nj = j + dj[d];
        if (!m.inside(ni, nj)) {
          touches_outside = true;  // image edge borders the unbounded region
          continue;
        }
        if (m.at(ni, nj)) continue;
        const int l = bg[std::size_t(ni) * m.w + nj];
        if (l == 1) touches_outside = true;
        if (l == hole_label) touches_hole = true;
      }
      if (touches_outside) out.outer.push_back({double(j), double(i)});
      if (touches_hole) out.inner.push_back({double(j), double(i)});
    }
  return out;
}

/// Output of the shape-repair stage for one frame.
struct ContourResult {
  Mask final_mask;
  Ellipse epi, endo;
  std::vector<Point> epi_points, endo_points;  // dense curve samples
  bool fell_back = false;                      // ellipses inherited from the previous frame
  bool endo_inside_epi = true;                 // flagged (not fixed) when violated
};

/// Myocardium region enclosed between two fitted contours (inside the
/// epicardial ellipse, outside the endocardial one); the region velocity
/// maps are computed over.
inline Mask contour_region(const Ellipse& epi, const Ellipse& endo, int h, int w) {
  Mask m(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      if (epi.contains(j, i) && !endo.contains(j, i)) m.at(i, j) = 1;
  return m;
}

/// Repairs one predicted frame: largest component, ellipse regression of
/// both boundaries, and the union of the component with both rasterized
/// 3-pixel rings. On DegenerateMask/FitFailed the previous frame's ellipses
/// are reused; with no previous frame the frame is Unrecoverable.
inline ContourResult finalize(const Mask& pred, const ContourResult* prev = nullptr, double ring_width = 3.0) {
  Mask comp = largest_component(pred);
  ContourResult out;
  try {
    Boundaries b = extract_boundaries(comp);
    out.epi = fit_ellipse(b.outer);
    out.endo = fit_ellipse(b.inner);
  } catch (const DegenerateMask& e) {
    if (!prev) throw Unrecoverable(std::string("finalize: ") + e.what() + " and no previous frame");
    out.epi = prev->epi;
    out.endo = prev->endo;
    out.fell_back = true;
  } catch (const FitFailed& e) {
    if (!prev) throw Unrecoverable(std::string("finalize: ") + e.what() + " and no previous frame");
    out.epi = prev->epi;
    out.endo = prev->endo;
    out.fell_back = true;
  }
  if (out.endo.a > out.epi.a) std::swap(out.epi, out.endo);  // larger fit is the epicardium

  out.epi_points = ellipse_samples(out.epi);
  out.endo_points = ellipse_samples(out.endo);
  for (const auto& p : out.endo_points)
    if (out.epi.implicit(p.x, p.y) > 1.0) {
      out.endo_inside_epi = false;
      break;
    }

  out.final_mask = comp;
  for (const Ellipse* e : {&out.epi, &out.endo}) {
    Mask ring = rasterize_ring(*e, ring_width, pred.h, pred.w);
    for (std::size_t k = 0; k < ring.v.size(); ++k) out.final_mask.v[k] |= ring.v[k];
  }
  return out;
}

}  // namespace mvmseg
