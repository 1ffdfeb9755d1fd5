#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "mvmseg/ellipse.hpp"
#include "mvmseg/mask.hpp"
#include "mvmseg/rng.hpp"
#include "mvmseg/tensor.hpp"

namespace mvmseg {

/// One Gaussian lobe of the global longitudinal velocity curve:
/// amplitude (cm/s), peak time and width as cardiac-cycle fractions.
struct VelocityLobe {
  double amp = 0, mu = 0, sigma = 1;
};

struct PhantomConfig {
  int size = 64;    // H = W
  int frames = 50;  // per cardiac cycle
  int subjects = 10;
  int slices_min = 3, slices_max = 5;  // per subject

  double epi_a_min = 16.0, epi_a_max = 21.0;  // epicardial semi-major (px)
  double epi_flatten_max = 0.25;              // semi-minor >= (1-f) * semi-major
  double wall_min = 4.0, wall_max = 7.0;      // annulus thickness (px)
  double center_jitter = 3.0;                 // px, per study
  double contraction_amp = 0.10;              // peak fractional radial contraction

  VelocityLobe systolic{+6.0, 0.15, 0.06};
  VelocityLobe diastolic{-9.0, 0.55, 0.05};
  VelocityLobe atrial{-4.0, 0.88, 0.04};
  double velocity_amp_jitter = 0.0;   // fractional per-study amplitude scaling
  double velocity_time_jitter = 0.0;  // absolute per-study peak-time shift

  double venc = 30.0;  // cm/s
  double mag_noise_sigma = 0.03;
  double phase_noise_sigma = 0.3;  // cm/s
  double annulus_value = 1.0, pool_value = 0.2, background_value = 0.0;
  double phase_modulation_amp = 0.5;  // cm/s, radial pattern inside the wall
  double inplane_amp = 1.5;           // cm/s, radial in-plane flow scale

  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("PhantomConfig: " + msg); };
    if (size < 32) fail("size " + std::to_string(size) + " < 32");
    if (frames < 2) fail("frames < 2");
    if (subjects < 1) fail("subjects < 1");
    if (slices_min < 1 || slices_max < slices_min) fail("bad slices range");
    if (wall_min * (1.0 - contraction_amp) < 3.0) fail("wall thickness can drop below 3 px under contraction");
    if (wall_max < wall_min || epi_a_max < epi_a_min) fail("bad geometry ranges");
    const double endo_min = (epi_a_min * (1.0 - epi_flatten_max) - wall_max) * (1.0 - contraction_amp);
    if (endo_min < 3.0) fail("endocardial semi-minor can drop below 3 px");
    if (center_jitter + epi_a_max + 2.0 > size / 2.0) fail("annulus can leave the frame");
    const double amp_scale = 1.0 + velocity_amp_jitter;
    const double vmax = std::max({std::abs(systolic.amp), std::abs(diastolic.amp), std::abs(atrial.amp)}) * amp_scale;
    if (vmax + phase_modulation_amp + 3.0 * phase_noise_sigma >= venc) fail("velocity amplitudes reach venc");
    if (inplane_amp + 3.0 * phase_noise_sigma >= venc) fail("in-plane amplitudes reach venc");
    // realized peak times must stay inside the default peak-search windows
    const double tj = velocity_time_jitter;
    if (systolic.mu - tj < 0.02 || systolic.mu + tj > 0.38) fail("systolic peak can leave [0,0.4)");
    if (diastolic.mu - tj < 0.42 || diastolic.mu + tj > 0.73) fail("diastolic peak can leave [0.4,0.75)");
    if (atrial.mu - tj < 0.77 || atrial.mu + tj > 0.97) fail("atrial peak can leave [0.75,1)");
  }
};

/// Sum of the three Gaussian lobes at cycle fraction t.
inline double analytic_velocity(const VelocityLobe& s, const VelocityLobe& d, const VelocityLobe& a, double t_frac) {
  double v = 0.0;
  for (const auto* l : {&s, &d, &a}) {
    const double u = (t_frac - l->mu) / l->sigma;
    v += l->amp * std::exp(-0.5 * u * u);
  }
  return v;
}

inline double analytic_velocity(const PhantomConfig& cfg, double t_frac) {
  return analytic_velocity(cfg.systolic, cfg.diastolic, cfg.atrial, t_frac);
}

/// One synthetic slice acquisition with exact ground truth.
struct CineStudy {
  int subject_id = 0, slice_id = 0;
  int frames = 0, size = 0;
  double venc = 0;
  Tensor<float> magnitude;                             // [T,1,H,W]
  Tensor<float> phase;                                 // [T,3,H,W], cm/s
  std::vector<Mask> gt_mask;                           // per frame
  std::vector<std::pair<Ellipse, Ellipse>> gt_contours;  // (epi, endo) per frame
  std::vector<double> gt_curve;                        // analytic velocity per frame
  VelocityLobe lobes[3];                               // realized (jittered) lobes
};

namespace phantom_detail {

// Ground-truth rasterization uses cell coverage: a pixel belongs to the
// annulus iff its center lies within half a pixel of the continuous band,
// i.e. inside the epicardial ellipse dilated by 0.5 px and outside the
// endocardial ellipse eroded by 0.5 px. Boundary pixel centers then
// straddle the true curves instead of sitting strictly inside them.
inline Mask rasterize_annulus(const Ellipse& epi, const Ellipse& endo, int size) {
  Ellipse epi_d = epi, endo_e = endo;
  epi_d.a += 0.5;
  epi_d.b += 0.5;
  endo_e.a -= 0.5;
  endo_e.b -= 0.5;
  Mask m(size, size);
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j)
      if (epi_d.contains(j, i) && !endo_e.contains(j, i)) m.at(i, j) = 1;
  return m;
}

}  // namespace phantom_detail

/// Fully seed-deterministic study synthesis: per-frame contracting ellipse
/// pair, bright-annulus magnitude, velocity-encoded phase channels, and all
/// ground-truth fields.
inline CineStudy generate_study(const PhantomConfig& cfg, int subject_id, int slice_id) {
  cfg.validate();
  Rng rng = Rng(cfg.seed).fork(std::uint64_t(subject_id) * 64 + std::uint64_t(slice_id) + 1);

  CineStudy st;
  st.subject_id = subject_id;
  st.slice_id = slice_id;
  st.frames = cfg.frames;
  st.size = cfg.size;
  st.venc = cfg.venc;

  // per-study geometry
  const double a_epi = rng.uniform(cfg.epi_a_min, cfg.epi_a_max);
  const double b_epi = a_epi * (1.0 - rng.uniform(0.0, cfg.epi_flatten_max));
  const double wall = rng.uniform(cfg.wall_min, cfg.wall_max);
  const double orient = rng.uniform(0.0, M_PI);
  const double c0 = (cfg.size - 1) / 2.0;
  const double cx = c0 + rng.uniform(-cfg.center_jitter, cfg.center_jitter);
  const double cy = c0 + rng.uniform(-cfg.center_jitter, cfg.center_jitter);

  // per-study velocity lobes
  const VelocityLobe base[3] = {cfg.systolic, cfg.diastolic, cfg.atrial};
  for (int k = 0; k < 3; ++k) {
    st.lobes[k] = base[k];
    st.lobes[k].amp *= 1.0 + rng.uniform(-cfg.velocity_amp_jitter, cfg.velocity_amp_jitter);
    st.lobes[k].mu += rng.uniform(-cfg.velocity_time_jitter, cfg.velocity_time_jitter);
  }

  const int T = cfg.frames, H = cfg.size, W = cfg.size;
  st.magnitude = Tensor<float>({T, 1, H, W});
  st.phase = Tensor<float>({T, 3, H, W});
  st.gt_mask.reserve(std::size_t(T));
  st.gt_contours.reserve(std::size_t(T));
  st.gt_curve.reserve(std::size_t(T));

  for (int t = 0; t < T; ++t) {
    const double t_frac = double(t) / T;
    const double s = 1.0 - cfg.contraction_amp * std::sin(M_PI * t_frac) * std::sin(M_PI * t_frac);
    Ellipse epi{cx, cy, a_epi * s, b_epi * s, orient};
    Ellipse endo{cx, cy, (a_epi - wall) * s, (b_epi - wall) * s, orient};
    Mask mask = phantom_detail::rasterize_annulus(epi, endo, cfg.size);
    const double v_t = analytic_velocity(st.lobes[0], st.lobes[1], st.lobes[2], t_frac);
    const double inplane_t = cfg.inplane_amp * std::sin(2.0 * M_PI * t_frac);

    // radial modulation pattern, de-meaned over the annulus so the masked
    // mean of phase-z equals the analytic curve exactly at sigma = 0
    std::vector<double> modulation(std::size_t(H) * W, 0.0);
    double mod_sum = 0.0;
    int area = 0;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        if (!mask.at(i, j)) continue;
        const double rho = std::sqrt(epi.implicit(j, i));  // ~[endo/epi, 1] inside the wall
        const double mv = cfg.phase_modulation_amp * std::cos(4.0 * M_PI * rho);
        modulation[std::size_t(i) * W + j] = mv;
        mod_sum += mv;
        ++area;
      }
    const double mod_mean = area > 0 ? mod_sum / area : 0.0;

    float* mag = st.magnitude.data() + std::size_t(t) * H * W;
    float* ph = st.phase.data() + std::size_t(t) * 3 * H * W;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const std::size_t k = std::size_t(i) * W + j;
        const bool in_wall = mask.at(i, j) != 0;
        const bool in_pool = !in_wall && endo.contains(j, i);
        double m = in_wall ? cfg.annulus_value : (in_pool ? cfg.pool_value : cfg.background_value);
        mag[k] = float(m + rng.normal(0.0, cfg.mag_noise_sigma));

        double vx = 0.0, vy = 0.0, vz = 0.0;
        if (in_wall) {
          const double dx = j - cx, dy = i - cy;
          const double r = std::max(std::hypot(dx, dy), 1e-9);
          vx = inplane_t * dx / r;
          vy = inplane_t * dy / r;
          vz = v_t + (modulation[k] - mod_mean);
        }
        ph[k] = float(vx + rng.normal(0.0, cfg.phase_noise_sigma));
        ph[std::size_t(H) * W + k] = float(vy + rng.normal(0.0, cfg.phase_noise_sigma));
        ph[2 * std::size_t(H) * W + k] = float(vz + rng.normal(0.0, cfg.phase_noise_sigma));
      }

    st.gt_mask.push_back(std::move(mask));
    st.gt_contours.push_back({epi, endo});
    st.gt_curve.push_back(v_t);
  }
  return st;
}

/// Copies frame t out of a study as [1,H,W] magnitude and [3,H,W] phase.
inline std::pair<Tensor<float>, Tensor<float>> study_frame(const CineStudy& st, int t) {
  const int H = st.size, W = st.size;
  Tensor<float> mag({1, H, W}), phase({3, H, W});
  std::copy(st.magnitude.data() + std::size_t(t) * H * W, st.magnitude.data() + std::size_t(t + 1) * H * W, mag.data());
  std::copy(st.phase.data() + std::size_t(t) * 3 * H * W, st.phase.data() + std::size_t(t + 1) * 3 * H * W, phase.data());
  return {std::move(mag), std::move(phase)};
}

/// Number of slices for one subject (deterministic in the config seed).
inline int slices_for_subject(const PhantomConfig& cfg, int subject_id) {
  if (cfg.slices_min == cfg.slices_max) return cfg.slices_min;
  Rng rng = Rng(cfg.seed).fork(0x51c5u * 1000 + std::uint64_t(subject_id));
  return cfg.slices_min + rng.uniform_int(cfg.slices_max - cfg.slices_min + 1);
}

/// Deterministic core of augment(); exposed so tests can force the
/// transform.
template <typename T>
void augment_with(Tensor<T>& mag, Tensor<T>& phase, Mask& mask, bool flip, double theta) {
  const int H = mask.h, W = mask.w;
  if (mag.rank() != 3 || phase.rank() != 3 || mag.dim(1) != H || mag.dim(2) != W || phase.dim(1) != H || phase.dim(2) != W)
    throw std::invalid_argument("augment: magnitude/phase/mask shapes disagree");
  const double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0;
  const double ct = std::cos(theta), stheta = std::sin(theta);

  auto src_of = [&](int i, int j) {
    double x = j - cx, y = i - cy;
    // inverse map: rotate by -theta, then undo the flip
    double sx = x * ct + y * stheta;
    double sy = -x * stheta + y * ct;
    if (flip) sx = -sx;
    return std::pair<double, double>{cx + sx, cy + sy};
  };

  const int channels = mag.dim(0) + phase.dim(0);
  std::vector<T> out(std::size_t(channels) * H * W, T(0));
  Mask out_mask(H, W);
  auto chan = [&](int c) -> const T* {
    if (c < mag.dim(0)) return mag.data() + std::size_t(c) * H * W;
    return phase.data() + std::size_t(c - mag.dim(0)) * H * W;
  };

  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      auto [sx, sy] = src_of(i, j);
      // nearest neighbour for the label
      const int ni = int(std::lround(sy)), nj = int(std::lround(sx));
      if (ni >= 0 && ni < H && nj >= 0 && nj < W) out_mask.at(i, j) = mask.at(ni, nj);
      // bilinear for image channels, zero outside
      const int i0 = int(std::floor(sy)), j0 = int(std::floor(sx));
      const double fi = sy - i0, fj = sx - j0;
      for (int c = 0; c < channels; ++c) {
        const T* src = chan(c);
        double acc = 0.0;
        for (int u = 0; u < 2; ++u)
          for (int v = 0; v < 2; ++v) {
            const int ii = i0 + u, jj = j0 + v;
            if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
            const double wgt = (u ? fi : 1.0 - fi) * (v ? fj : 1.0 - fj);
            acc += wgt * double(src[std::size_t(ii) * W + jj]);
          }
        out[(std::size_t(c) * H + i) * W + j] = T(acc);
      }
    }

  for (int c = 0; c < mag.dim(0); ++c)
    std::copy(out.begin() + std::ptrdiff_t(std::size_t(c) * H * W), out.begin() + std::ptrdiff_t(std::size_t(c + 1) * H * W),
              mag.data() + std::size_t(c) * H * W);
  for (int c = 0; c < phase.dim(0); ++c)
    std::copy(out.begin() + std::ptrdiff_t(std::size_t(mag.dim(0) + c) * H * W),
              out.begin() + std::ptrdiff_t(std::size_t(mag.dim(0) + c + 1) * H * W), phase.data() + std::size_t(c) * H * W);
  mask = std::move(out_mask);
}

/// Flip (probability 1/2) then rotate by an angle drawn uniformly from
/// [0, 90] degrees about the image center: bilinear for image channels,
/// nearest-neighbour for the mask, zero fill outside, one shared geometric
/// transform for every channel and the label.
template <typename T>
void augment(Tensor<T>& mag, Tensor<T>& phase, Mask& mask, Rng& rng) {
  const bool flip = rng.uniform() < 0.5;
  const double theta = rng.uniform(0.0, M_PI / 2.0);
  augment_with(mag, phase, mask, flip, theta);
}

}  // namespace mvmseg
