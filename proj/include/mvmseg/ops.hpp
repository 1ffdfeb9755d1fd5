#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "mvmseg/mask.hpp"
#include "mvmseg/parallel.hpp"
#include "mvmseg/tensor.hpp"

namespace mvmseg {

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <typename T>
void require_rank4(const Tensor<T>& t, const char* op, const char* name) {
  require(t.defined() && t.rank() == 4,
          std::string(op) + ": " + name + " must be rank 4, got " + (t.defined() ? shape_string(t.shape()) : "undefined"));
}

// Zero-pads every HxW plane by one pixel on each side. Output planes are
// (H+2)x(W+2), laid out plane after plane; only the border is zeroed.
template <typename T>
typename Tensor<T>::Storage pad1(const T* src, int planes, int H, int W) {
  const int Hp = H + 2, Wp = W + 2;
  typename Tensor<T>::Storage out(std::size_t(planes) * Hp * Wp);
  parallel_for(planes, [&](int p) {
    const T* s = src + std::size_t(p) * H * W;
    T* d = out.data() + std::size_t(p) * Hp * Wp;
    std::fill(d, d + Wp, T(0));
    std::fill(d + std::size_t(Hp - 1) * Wp, d + std::size_t(Hp) * Wp, T(0));
    for (int i = 0; i < H; ++i) {
      T* row = d + std::size_t(i + 1) * Wp;
      row[0] = T(0);
      std::copy(s + std::size_t(i) * W, s + std::size_t(i + 1) * W, row + 1);
      row[Wp - 1] = T(0);
    }
  });
  return out;
}

// Dot product with 16 striped partial sums combined in a fixed order:
// vectorizable without reassociation license, and the summation order is a
// pure function of n, so results are bitwise reproducible.
template <typename T>
inline T dot_strided(const T* a, const T* b, int n) {
  constexpr int L = 16;
  T part[L] = {};
  int j = 0;
  for (; j + L <= n; j += L)
    for (int l = 0; l < L; ++l) part[l] += a[j + l] * b[j + l];
  T s = T(0);
  for (int l = 0; l < L; ++l) s += part[l];
  for (; j < n; ++j) s += a[j] * b[j];
  return s;
}

template <typename T>
inline T sum_strided(const T* a, int n) {
  constexpr int L = 16;
  T part[L] = {};
  int j = 0;
  for (; j + L <= n; j += L)
    for (int l = 0; l < L; ++l) part[l] += a[j + l];
  T s = T(0);
  for (int l = 0; l < L; ++l) s += part[l];
  for (; j < n; ++j) s += a[j];
  return s;
}

// All nine kernel-tap sums of a weight-gradient tile in one pass over the
// plane: out9[u*3+v] = sum_{i,j} dy[i,j] * xp[i+u, j+v]. Striped lane
// accumulators with a fixed combine order keep the result bitwise
// reproducible while letting the lane loop vectorize.
template <typename T>
inline void conv3x3_dw_tile(const T* dy, const T* xp, T* out9, int H, int W) {
  constexpr int L = 16;
  const int Wp = W + 2;
  T acc[9][L] = {};
  T tail[9] = {};
  for (int i = 0; i < H; ++i) {
    const T* dyr = dy + std::size_t(i) * W;
    const T* x0 = xp + std::size_t(i) * Wp;
    const T* x1 = x0 + Wp;
    const T* x2 = x1 + Wp;
    int j = 0;
    for (; j + L <= W; j += L) {
      for (int l = 0; l < L; ++l) {
        const T d = dyr[j + l];
        acc[0][l] += d * x0[j + l];
        acc[1][l] += d * x0[j + l + 1];
        acc[2][l] += d * x0[j + l + 2];
        acc[3][l] += d * x1[j + l];
        acc[4][l] += d * x1[j + l + 1];
        acc[5][l] += d * x1[j + l + 2];
        acc[6][l] += d * x2[j + l];
        acc[7][l] += d * x2[j + l + 1];
        acc[8][l] += d * x2[j + l + 2];
      }
    }
    for (; j < W; ++j) {
      const T d = dyr[j];
      tail[0] += d * x0[j];
      tail[1] += d * x0[j + 1];
      tail[2] += d * x0[j + 2];
      tail[3] += d * x1[j];
      tail[4] += d * x1[j + 1];
      tail[5] += d * x1[j + 2];
      tail[6] += d * x2[j];
      tail[7] += d * x2[j + 1];
      tail[8] += d * x2[j + 2];
    }
  }
  for (int k = 0; k < 9; ++k) {
    T s = T(0);
    for (int l = 0; l < L; ++l) s += acc[k][l];
    out9[k] = s + tail[k];
  }
}

// acc[i,:] += sum_{u,v} k[u*3+v] * plane[(i+u)*(W+2) + v + :], the hot
// loop of every 3x3 convolution here (forward and both backward passes).
template <typename T>
inline void conv3x3_accum(const T* plane, const T* k, T* acc, int H, int W) {
  const int Wp = W + 2;
  for (int i = 0; i < H; ++i) {
    T* yr = acc + std::size_t(i) * W;
    for (int u = 0; u < 3; ++u) {
      const T* xr = plane + std::size_t(i + u) * Wp;
      const T w0 = k[u * 3 + 0], w1 = k[u * 3 + 1], w2 = k[u * 3 + 2];
      for (int j = 0; j < W; ++j) yr[j] += w0 * xr[j] + w1 * xr[j + 1] + w2 * xr[j + 2];
    }
  }
}

// acc[i,:] += sum_{u,v} k[u*3+v] * plane[i+u-1, j+v-1] with the plane read
// in place (implicit zero border); used where building a padded copy would
// cost more than it saves.
template <typename T>
inline void conv3x3_accum_nopad(const T* plane, const T* k, T* acc, int H, int W) {
  for (int i = 0; i < H; ++i) {
    T* yr = acc + std::size_t(i) * W;
    for (int u = 0; u < 3; ++u) {
      const int r = i + u - 1;
      if (r < 0 || r >= H) continue;
      const T* xr = plane + std::size_t(r) * W;
      const T w0 = k[u * 3 + 0], w1 = k[u * 3 + 1], w2 = k[u * 3 + 2];
      if (W == 1) {
        yr[0] += w1 * xr[0];
        continue;
      }
      yr[0] += w1 * xr[0] + w2 * xr[1];
      for (int j = 1; j + 1 < W; ++j) yr[j] += w0 * xr[j - 1] + w1 * xr[j] + w2 * xr[j + 1];
      yr[W - 1] += w0 * xr[W - 2] + w1 * xr[W - 1];
    }
  }
}

template <typename T>
void conv2d_backward(Tensor<T> x, Tensor<T> w, Tensor<T> b, Tensor<T> y, const typename Tensor<T>::Storage& xp) {
  const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), Hp = H + 2, Wp = W + 2;
  const T* dy = y.grad();
  if (x.requires_grad()) {
    // dx = dy correlated with the 180-degree flipped kernels
    parallel_for(B * Cin, [&](int bc) {
      const int bb = bc / Cin, c = bc % Cin;
      T* dx = x.grad() + (std::size_t(bb) * Cin + c) * H * W;
      for (int o = 0; o < Cout; ++o) {
        const T* wk = w.data() + (std::size_t(o) * Cin + c) * 9;
        T wf[9];
        for (int u = 0; u < 3; ++u)
          for (int v = 0; v < 3; ++v) wf[u * 3 + v] = wk[(2 - u) * 3 + (2 - v)];
        conv3x3_accum_nopad(dy + (std::size_t(bb) * Cout + o) * H * W, wf, dx, H, W);
      }
    });
  }
  if (w.requires_grad()) {
    // per-(batch,out-channel) partials, then a fixed-order reduction over
    // the batch so results do not depend on thread count
    std::vector<T> dwp(std::size_t(B) * Cout * Cin * 9, T(0));
    parallel_for(B * Cout, [&](int bo) {
      const int bb = bo / Cout, o = bo % Cout;
      const T* dyb = dy + (std::size_t(bb) * Cout + o) * H * W;
      T* out = dwp.data() + (std::size_t(bb) * Cout + o) * Cin * 9;
      for (int c = 0; c < Cin; ++c)
        conv3x3_dw_tile(dyb, xp.data() + (std::size_t(bb) * Cin + c) * Hp * Wp, out + std::size_t(c) * 9, H, W);
    });
    T* dw = w.grad();
    const std::size_t nk = std::size_t(Cout) * Cin * 9;
    for (int bb = 0; bb < B; ++bb) {
      const T* part = dwp.data() + std::size_t(bb) * nk;
      for (std::size_t k = 0; k < nk; ++k) dw[k] += part[k];
    }
  }
  if (b.requires_grad()) {
    T* db = b.grad();
    for (int bb = 0; bb < B; ++bb)
      for (int o = 0; o < Cout; ++o) db[o] += sum_strided(dy + (std::size_t(bb) * Cout + o) * H * W, H * W);
  }
}

}  // namespace detail

/// 3x3 convolution, stride 1, zero padding 1 (spatial size preserved).
/// x: [B,Cin,H,W], w: [Cout,Cin,3,3], b: [Cout] -> [B,Cout,H,W].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::require_rank4(x, "conv2d", "x");
  detail::require_rank4(w, "conv2d", "w");
  detail::require(w.dim(2) == 3 && w.dim(3) == 3,
                  "conv2d: kernel extent " + std::to_string(w.dim(2)) + "x" + std::to_string(w.dim(3)) + " must be 3x3");
  detail::require(x.dim(1) == w.dim(1), "conv2d: input channel extent " + std::to_string(x.dim(1)) +
                                            " does not match weight input-channel extent " + std::to_string(w.dim(1)));
  detail::require(b.defined() && b.rank() == 1 && b.dim(0) == w.dim(0),
                  "conv2d: bias extent must equal weight output-channel extent " + std::to_string(w.dim(0)));
  const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3), Cout = w.dim(0);
  const int Hp = H + 2, Wp = W + 2;

  Tensor<T> y = Tensor<T>::uninit({B, Cout, H, W});
  typename Tensor<T>::Storage xp = detail::pad1(x.data(), B * Cin, H, W);
  parallel_for(B * Cout, [&](int bo) {
    const int bb = bo / Cout, o = bo % Cout;
    T* ybase = y.data() + (std::size_t(bb) * Cout + o) * H * W;
    std::fill(ybase, ybase + std::size_t(H) * W, b.data()[o]);
    for (int c = 0; c < Cin; ++c)
      detail::conv3x3_accum(xp.data() + (std::size_t(bb) * Cin + c) * Hp * Wp, w.data() + (std::size_t(o) * Cin + c) * 9,
                            ybase, H, W);
  });

  if (tape && (x.requires_grad() || w.requires_grad() || b.requires_grad())) {
    y.set_requires_grad(true);
    auto saved = std::make_shared<typename Tensor<T>::Storage>(std::move(xp));
    tape->record([x, w, b, y, saved]() { detail::conv2d_backward(x, w, b, y, *saved); });
  }
  return y;
}

/// 1x1 convolution (channel mixing). w: [Cout,Cin,1,1].
template <typename T>
Tensor<T> conv1x1(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::require_rank4(x, "conv1x1", "x");
  detail::require_rank4(w, "conv1x1", "w");
  detail::require(w.dim(2) == 1 && w.dim(3) == 1, "conv1x1: kernel must be 1x1");
  detail::require(x.dim(1) == w.dim(1), "conv1x1: input channel extent " + std::to_string(x.dim(1)) +
                                            " does not match weight input-channel extent " + std::to_string(w.dim(1)));
  detail::require(b.defined() && b.rank() == 1 && b.dim(0) == w.dim(0),
                  "conv1x1: bias extent must equal weight output-channel extent " + std::to_string(w.dim(0)));
  const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3), Cout = w.dim(0);
  const std::size_t hw = std::size_t(H) * W;

  Tensor<T> y = Tensor<T>::uninit({B, Cout, H, W});
  parallel_for(B * Cout, [&](int bo) {
    const int bb = bo / Cout, o = bo % Cout;
    T* yb = y.data() + (std::size_t(bb) * Cout + o) * hw;
    std::fill(yb, yb + hw, b.data()[o]);
    for (int c = 0; c < Cin; ++c) {
      const T wv = w.data()[std::size_t(o) * Cin + c];
      const T* xb = x.data() + (std::size_t(bb) * Cin + c) * hw;
      for (std::size_t k = 0; k < hw; ++k) yb[k] += wv * xb[k];
    }
  });

  if (tape && (x.requires_grad() || w.requires_grad() || b.requires_grad())) {
    y.set_requires_grad(true);
    tape->record([x, w, b, y, B, Cin, Cout, hw]() {
      Tensor<T> xm = x, wm = w, bm = b, ym = y;
      const T* dy = ym.grad();
      if (xm.requires_grad()) {
        parallel_for(B * Cin, [&](int bc) {
          const int bb = bc / Cin, c = bc % Cin;
          T* dx = xm.grad() + (std::size_t(bb) * Cin + c) * hw;
          for (int o = 0; o < Cout; ++o) {
            const T wv = wm.data()[std::size_t(o) * Cin + c];
            const T* dyb = dy + (std::size_t(bb) * Cout + o) * hw;
            for (std::size_t k = 0; k < hw; ++k) dx[k] += wv * dyb[k];
          }
        });
      }
      if (wm.requires_grad()) {
        std::vector<T> dwp(std::size_t(B) * Cout * Cin, T(0));
        parallel_for(B * Cout, [&](int bo) {
          const int bb = bo / Cout, o = bo % Cout;
          const T* dyb = dy + (std::size_t(bb) * Cout + o) * hw;
          for (int c = 0; c < Cin; ++c)
            dwp[(std::size_t(bb) * Cout + o) * Cin + c] =
                detail::dot_strided(dyb, xm.data() + (std::size_t(bb) * Cin + c) * hw, int(hw));
        });
        T* dw = wm.grad();
        for (int bb = 0; bb < B; ++bb)
          for (std::size_t k = 0; k < std::size_t(Cout) * Cin; ++k) dw[k] += dwp[std::size_t(bb) * Cout * Cin + k];
      }
      if (bm.requires_grad()) {
        T* db = bm.grad();
        for (int bb = 0; bb < B; ++bb)
          for (int o = 0; o < Cout; ++o) db[o] += detail::sum_strided(dy + (std::size_t(bb) * Cout + o) * hw, int(hw));
      }
    });
  }
  return y;
}

/// 2x2 max pooling, stride 2. Requires even H and W. Gradient routes to the
/// argmax position only; ties go to the first position in scan order.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  detail::require_rank4(x, "maxpool2", "x");
  detail::require(x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0,
                  "maxpool2: spatial extents " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) + " must be even");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = H / 2, Wo = W / 2;

  Tensor<T> y = Tensor<T>::uninit({B, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(y.size());
  parallel_for(B * C, [&](int bc) {
    const T* xb = x.data() + std::size_t(bc) * H * W;
    T* yb = y.data() + std::size_t(bc) * Ho * Wo;
    std::size_t* ab = argmax->data() + std::size_t(bc) * Ho * Wo;
    for (int i = 0; i < Ho; ++i) {
      for (int j = 0; j < Wo; ++j) {
        std::size_t best = std::size_t(2 * i) * W + 2 * j;
        T bv = xb[best];
        for (int u = 0; u < 2; ++u)
          for (int v = 0; v < 2; ++v) {
            const std::size_t k = std::size_t(2 * i + u) * W + 2 * j + v;
            if (xb[k] > bv) {  // strict: earliest scan-order winner on ties
              bv = xb[k];
              best = k;
            }
          }
        yb[std::size_t(i) * Wo + j] = bv;
        ab[std::size_t(i) * Wo + j] = std::size_t(bc) * H * W + best;
      }
    }
  });

  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    tape->record([x, y, argmax, B, C, Ho, Wo]() {
      Tensor<T> xm = x, ym = y;
      const T* dy = ym.grad();
      T* dx = xm.grad();
      // argmax targets stay inside their own (batch, channel) plane
      parallel_for(B * C, [&](int bc) {
        const std::size_t lo = std::size_t(bc) * Ho * Wo, hi = lo + std::size_t(Ho) * Wo;
        for (std::size_t k = lo; k < hi; ++k) dx[(*argmax)[k]] += dy[k];
      });
    });
  }
  return y;
}

/// Nearest-neighbour x2 upsampling: every pixel becomes a 2x2 block.
template <typename T>
Tensor<T> upsample_nn2(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  detail::require_rank4(x, "upsample_nn2", "x");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> y = Tensor<T>::uninit({B, C, 2 * H, 2 * W});
  parallel_for(B * C, [&](int bc) {
    const T* xb = x.data() + std::size_t(bc) * H * W;
    T* yb = y.data() + std::size_t(bc) * 4 * H * W;
    for (int i = 0; i < 2 * H; ++i) {
      const T* xr = xb + std::size_t(i / 2) * W;
      T* yr = yb + std::size_t(i) * 2 * W;
      for (int j = 0; j < 2 * W; ++j) yr[j] = xr[j / 2];
    }
  });

  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    tape->record([x, y, B, C, H, W]() {
      Tensor<T> xm = x, ym = y;
      const T* dy = ym.grad();
      parallel_for(B * C, [&](int bc) {
        T* dx = xm.grad() + std::size_t(bc) * H * W;
        const T* dyb = dy + std::size_t(bc) * 4 * H * W;
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            const T* r0 = dyb + std::size_t(2 * i) * 2 * W + 2 * j;
            const T* r1 = dyb + std::size_t(2 * i + 1) * 2 * W + 2 * j;
            dx[std::size_t(i) * W + j] += r0[0] + r0[1] + r1[0] + r1[1];
          }
      });
    });
  }
  return y;
}

/// Channel concatenation: channels of a precede channels of b.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::require_rank4(a, "concat_channels", "a");
  detail::require_rank4(b, "concat_channels", "b");
  detail::require(a.dim(0) == b.dim(0), "concat_channels: batch extents " + std::to_string(a.dim(0)) + " vs " +
                                            std::to_string(b.dim(0)) + " differ");
  detail::require(a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
                  "concat_channels: spatial extents " + std::to_string(a.dim(2)) + "x" + std::to_string(a.dim(3)) +
                      " vs " + std::to_string(b.dim(2)) + "x" + std::to_string(b.dim(3)) + " differ");
  const int B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  const std::size_t hw = std::size_t(H) * W;

  Tensor<T> y = Tensor<T>::uninit({B, Ca + Cb, H, W});
  for (int bb = 0; bb < B; ++bb) {
    T* yb = y.data() + std::size_t(bb) * (Ca + Cb) * hw;
    std::copy(a.data() + std::size_t(bb) * Ca * hw, a.data() + std::size_t(bb + 1) * Ca * hw, yb);
    std::copy(b.data() + std::size_t(bb) * Cb * hw, b.data() + std::size_t(bb + 1) * Cb * hw, yb + std::size_t(Ca) * hw);
  }

  if (tape && (a.requires_grad() || b.requires_grad())) {
    y.set_requires_grad(true);
    tape->record([a, b, y, B, Ca, Cb, hw]() {
      Tensor<T> am = a, bm = b, ym = y;
      const T* dy = ym.grad();
      for (int bb = 0; bb < B; ++bb) {
        const T* dyb = dy + std::size_t(bb) * (Ca + Cb) * hw;
        if (am.requires_grad()) {
          T* da = am.grad() + std::size_t(bb) * Ca * hw;
          for (std::size_t k = 0; k < std::size_t(Ca) * hw; ++k) da[k] += dyb[k];
        }
        if (bm.requires_grad()) {
          T* db = bm.grad() + std::size_t(bb) * Cb * hw;
          for (std::size_t k = 0; k < std::size_t(Cb) * hw; ++k) db[k] += dyb[std::size_t(Ca) * hw + k];
        }
      }
    });
  }
  return y;
}

/// Elementwise max(0, x).
template <typename T>
Tensor<T> relu(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  Tensor<T> y = Tensor<T>::uninit(x.shape());
  const T* xd = x.data();
  T* yd = y.data();
  parallel_chunks(x.size(), [&](std::size_t lo, std::size_t hi) {
    for (std::size_t k = lo; k < hi; ++k) yd[k] = xd[k] > T(0) ? xd[k] : T(0);
  });
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    tape->record([x, y]() {
      Tensor<T> xm = x, ym = y;
      const T* dy = ym.grad();
      const T* xd2 = xm.data();
      T* dx = xm.grad();
      parallel_chunks(xm.size(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t k = lo; k < hi; ++k)
          if (xd2[k] > T(0)) dx[k] += dy[k];
      });
    });
  }
  return y;
}

/// Elementwise logistic sigmoid, numerically stable on both tails.
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  Tensor<T> y = Tensor<T>::uninit(x.shape());
  const T* xd = x.data();
  T* yd = y.data();
  parallel_chunks(x.size(), [&](std::size_t lo, std::size_t hi) {
    for (std::size_t k = lo; k < hi; ++k) {
      const T v = xd[k];
      if (v >= T(0)) {
        const T e = std::exp(-v);
        yd[k] = T(1) / (T(1) + e);
      } else {
        const T e = std::exp(v);
        yd[k] = e / (T(1) + e);
      }
    }
  });
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    tape->record([x, y]() {
      Tensor<T> xm = x, ym = y;
      const T* dy = ym.grad();
      const T* yd2 = ym.data();
      T* dx = xm.grad();
      parallel_chunks(xm.size(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t k = lo; k < hi; ++k) dx[k] += yd2[k] * (T(1) - yd2[k]) * dy[k];
      });
    });
  }
  return y;
}

/// Elementwise sum of two same-shape tensors.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::require(a.shape() == b.shape(),
                  "add: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
  Tensor<T> y = Tensor<T>::uninit(a.shape());
  for (std::size_t k = 0; k < a.size(); ++k) y.data()[k] = a.data()[k] + b.data()[k];
  if (tape && (a.requires_grad() || b.requires_grad())) {
    y.set_requires_grad(true);
    tape->record([a, b, y]() {
      Tensor<T> am = a, bm = b, ym = y;
      const T* dy = ym.grad();
      if (am.requires_grad())
        for (std::size_t k = 0; k < am.size(); ++k) am.grad()[k] += dy[k];
      if (bm.requires_grad())
        for (std::size_t k = 0; k < bm.size(); ++k) bm.grad()[k] += dy[k];
    });
  }
  return y;
}

/// Elementwise product of two same-shape tensors.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::require(a.shape() == b.shape(),
                  "mul: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
  Tensor<T> y = Tensor<T>::uninit(a.shape());
  for (std::size_t k = 0; k < a.size(); ++k) y.data()[k] = a.data()[k] * b.data()[k];
  if (tape && (a.requires_grad() || b.requires_grad())) {
    y.set_requires_grad(true);
    tape->record([a, b, y]() {
      Tensor<T> am = a, bm = b, ym = y;
      const T* dy = ym.grad();
      if (am.requires_grad())
        for (std::size_t k = 0; k < am.size(); ++k) am.grad()[k] += bm.data()[k] * dy[k];
      if (bm.requires_grad())
        for (std::size_t k = 0; k < bm.size(); ++k) bm.grad()[k] += am.data()[k] * dy[k];
    });
  }
  return y;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor, Tape<T>* tape = nullptr) {
  Tensor<T> y = Tensor<T>::uninit(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) y.data()[k] = factor * x.data()[k];
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    tape->record([x, y, factor]() {
      Tensor<T> xm = x, ym = y;
      const T* dy = ym.grad();
      for (std::size_t k = 0; k < xm.size(); ++k) xm.grad()[k] += factor * dy[k];
    });
  }
  return y;
}

/// Sum of all elements, returned as a [1] tensor. Fixed scan-order
/// accumulation (in double) keeps the value deterministic.
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  double acc = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) acc += double(x.data()[k]);
  Tensor<T> y = Tensor<T>::from({1}, {T(acc)});
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    tape->record([x, y]() {
      Tensor<T> xm = x, ym = y;
      const T g = ym.grad()[0];
      for (std::size_t k = 0; k < xm.size(); ++k) xm.grad()[k] += g;
    });
  }
  return y;
}

/// Multiplies every channel of f ([B,C,H,W]) by the single-channel spatial
/// map a ([B,1,H,W]).
template <typename T>
Tensor<T> mul_channel_map(const Tensor<T>& f, const Tensor<T>& a, Tape<T>* tape = nullptr) {
  detail::require_rank4(f, "mul_channel_map", "f");
  detail::require_rank4(a, "mul_channel_map", "a");
  detail::require(a.dim(1) == 1, "mul_channel_map: map channel extent " + std::to_string(a.dim(1)) + " must be 1");
  detail::require(f.dim(0) == a.dim(0) && f.dim(2) == a.dim(2) && f.dim(3) == a.dim(3),
                  "mul_channel_map: shapes " + shape_string(f.shape()) + " and " + shape_string(a.shape()) +
                      " disagree outside the channel extent");
  const int B = f.dim(0), C = f.dim(1), H = f.dim(2), W = f.dim(3);
  const std::size_t hw = std::size_t(H) * W;
  Tensor<T> y = Tensor<T>::uninit(f.shape());
  for (int bb = 0; bb < B; ++bb) {
    const T* ab = a.data() + std::size_t(bb) * hw;
    for (int c = 0; c < C; ++c) {
      const T* fb = f.data() + (std::size_t(bb) * C + c) * hw;
      T* yb = y.data() + (std::size_t(bb) * C + c) * hw;
      for (std::size_t k = 0; k < hw; ++k) yb[k] = fb[k] * ab[k];
    }
  }
  if (tape && (f.requires_grad() || a.requires_grad())) {
    y.set_requires_grad(true);
    tape->record([f, a, y, B, C, hw]() {
      Tensor<T> fm = f, am = a, ym = y;
      const T* dy = ym.grad();
      for (int bb = 0; bb < B; ++bb) {
        const T* ab = am.data() + std::size_t(bb) * hw;
        for (int c = 0; c < C; ++c) {
          const std::size_t off = (std::size_t(bb) * C + c) * hw;
          if (fm.requires_grad()) {
            T* df = fm.grad() + off;
            for (std::size_t k = 0; k < hw; ++k) df[k] += ab[k] * dy[off + k];
          }
          if (am.requires_grad()) {
            T* da = am.grad() + std::size_t(bb) * hw;
            const T* fb = fm.data() + off;
            for (std::size_t k = 0; k < hw; ++k) da[k] += fb[k] * dy[off + k];
          }
        }
      }
    });
  }
  return y;
}

/// Per-pixel two-class softmax cross-entropy, averaged over all B*H*W
/// pixels. Labels are binary masks (0 = background, 1 = myocardium); any
/// other value is rejected. Stabilized by max-subtraction.
template <typename T>
Tensor<T> softmax_ce(const Tensor<T>& logits, const std::vector<Mask>& labels, Tape<T>* tape = nullptr) {
  detail::require_rank4(logits, "softmax_ce", "logits");
  detail::require(logits.dim(1) == 2, "softmax_ce: class extent " + std::to_string(logits.dim(1)) + " must be 2");
  const int B = logits.dim(0), H = logits.dim(2), W = logits.dim(3);
  detail::require(int(labels.size()) == B, "softmax_ce: got " + std::to_string(labels.size()) + " label masks for batch extent " +
                                               std::to_string(B));
  for (int bb = 0; bb < B; ++bb) {
    detail::require(labels[std::size_t(bb)].h == H && labels[std::size_t(bb)].w == W,
                    "softmax_ce: label mask " + std::to_string(bb) + " is " + std::to_string(labels[std::size_t(bb)].h) + "x" +
                        std::to_string(labels[std::size_t(bb)].w) + ", logits are " + std::to_string(H) + "x" + std::to_string(W));
    for (auto lv : labels[std::size_t(bb)].v)
      detail::require(lv == 0 || lv == 1, "softmax_ce: label value " + std::to_string(int(lv)) + " outside {0,1}");
  }

  const std::size_t hw = std::size_t(H) * W;
  auto probs = std::make_shared<std::vector<T>>(std::size_t(B) * 2 * hw);
  // per-item partial losses combined in batch order: deterministic for any
  // thread count
  std::vector<double> partial(std::size_t(B), 0.0);
  parallel_for(B, [&](int bb) {
    const T* l0 = logits.data() + (std::size_t(bb) * 2 + 0) * hw;
    const T* l1 = logits.data() + (std::size_t(bb) * 2 + 1) * hw;
    T* p0 = probs->data() + (std::size_t(bb) * 2 + 0) * hw;
    T* p1 = probs->data() + (std::size_t(bb) * 2 + 1) * hw;
    const std::uint8_t* lab = labels[std::size_t(bb)].v.data();
    double acc = 0.0;
    for (std::size_t k = 0; k < hw; ++k) {
      const T m = std::max(l0[k], l1[k]);
      const T e0 = std::exp(l0[k] - m), e1 = std::exp(l1[k] - m);
      const T z = e0 + e1;
      p0[k] = e0 / z;
      p1[k] = e1 / z;
      const T ly = lab[k] ? l1[k] : l0[k];
      acc += double(std::log(z)) - double(ly - m);
    }
    partial[std::size_t(bb)] = acc;
  });
  double acc = 0.0;
  for (int bb = 0; bb < B; ++bb) acc += partial[std::size_t(bb)];
  const double denom = double(B) * double(hw);
  Tensor<T> loss = Tensor<T>::from({1}, {T(acc / denom)});

  if (tape && logits.requires_grad()) {
    loss.set_requires_grad(true);
    auto labs = std::make_shared<std::vector<Mask>>(labels);
    tape->record([logits, loss, probs, labs, B, hw, denom]() {
      Tensor<T> lm = logits, sm = loss;
      const T g = sm.grad()[0];
      parallel_for(B, [&](int bb) {
        T* d0 = lm.grad() + (std::size_t(bb) * 2 + 0) * hw;
        T* d1 = lm.grad() + (std::size_t(bb) * 2 + 1) * hw;
        const T* p0 = probs->data() + (std::size_t(bb) * 2 + 0) * hw;
        const T* p1 = probs->data() + (std::size_t(bb) * 2 + 1) * hw;
        const std::uint8_t* lab = (*labs)[std::size_t(bb)].v.data();
        for (std::size_t k = 0; k < hw; ++k) {
          const T y1 = lab[k] ? T(1) : T(0);
          d0[k] += g * (p0[k] - (T(1) - y1)) / T(denom);
          d1[k] += g * (p1[k] - y1) / T(denom);
        }
      });
    });
  }
  return loss;
}

}  // namespace mvmseg
