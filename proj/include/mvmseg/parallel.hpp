#pragma once

#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace mvmseg {

/// Runs fn(i) for i in [0, n). Iterations must write disjoint outputs;
/// under that contract results are bitwise identical for any thread count
/// (static partition, no cross-thread reductions).
template <typename F>
inline void parallel_for(int n, F&& fn) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) fn(i);
#else
  for (int i = 0; i < n; ++i) fn(i);
#endif
}

/// Splits [0, n) into contiguous chunks, one fn(lo, hi) call each; for
/// elementwise work over large buffers. Same disjoint-write contract.
template <typename F>
inline void parallel_chunks(std::size_t n, F&& fn) {
#ifdef _OPENMP
  const std::size_t chunk = 1 << 16;
  if (n > 2 * chunk) {
    const int pieces = int((n + chunk - 1) / chunk);
#pragma omp parallel for schedule(static)
    for (int p = 0; p < pieces; ++p) {
      const std::size_t lo = std::size_t(p) * chunk;
      const std::size_t hi = lo + chunk < n ? lo + chunk : n;
      fn(lo, hi);
    }
    return;
  }
#endif
  fn(std::size_t(0), n);
}

/// Tunes the process allocator for the steady churn of MB-sized tensor
/// buffers (keeps freed pages mapped instead of cycling mmap/munmap).
/// Call once at program start; harmless elsewhere.
inline void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, -1);
#endif
}

}  // namespace mvmseg
