// Repairing a broken segmentation: rasterize an annulus, delete a quarter
// arc, and let the post-processing stage close it again.

#include <cstdio>

#include "mvmseg/postproc.hpp"

using namespace mvmseg;

int main() {
  Ellipse epi{31.5, 32.0, 17.0, 13.0, 0.3};
  Ellipse endo{31.5, 32.0, 11.0, 7.5, 0.3};

  Mask broken(64, 64);
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 64; ++j) {
      const double ang = std::atan2(i - epi.cy, j - epi.cx);
      if (ang >= 0.0 && ang < M_PI / 2.0) continue;  // the deleted arc
      if (epi.contains(j, i) && !endo.contains(j, i)) broken.at(i, j) = 1;
    }

  ContourResult r = finalize(broken);
  std::printf("input pixels: %d, repaired pixels: %d\n", broken.area(), r.final_mask.area());
  std::printf("epicardium:   center (%.2f, %.2f), axes (%.2f, %.2f)\n", r.epi.cx, r.epi.cy, r.epi.a, r.epi.b);
  std::printf("endocardium:  center (%.2f, %.2f), axes (%.2f, %.2f)\n", r.endo.cx, r.endo.cy, r.endo.a, r.endo.b);

  for (int i = 0; i < 64; i += 2) {
    for (int j = 0; j < 64; j += 1) std::putchar(r.final_mask.at(i, j) ? '#' : (broken.at(i, j) ? '+' : '.'));
    std::putchar('\n');
  }
  return 0;
}
