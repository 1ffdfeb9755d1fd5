#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvmseg/mask.hpp"
#include "mvmseg/tensor.hpp"

namespace mvmseg {

struct EmptyMask : std::runtime_error {
  int frame;
  explicit EmptyMask(int t) : std::runtime_error("global_curve: empty mask at frame " + std::to_string(t)), frame(t) {}
};

/// Per-frame mean longitudinal velocity over one cine slice.
struct VelocityCurve {
  std::vector<double> v;  // cm/s, length T
  double t_frac(int k) const { return double(k) / double(v.size()); }
  int frames() const { return int(v.size()); }
};

/// Linear phase-to-velocity map (no unwrapping): rescales values stored
/// against one venc to another.
inline double phase_to_velocity(double stored, double venc, double venc_stored) {
  if (venc <= 0 || venc_stored <= 0) throw std::invalid_argument("phase_to_velocity: venc must be positive");
  return stored * (venc / venc_stored);
}

/// curve[t] = mean of phase_z[t] over mask[t] foreground. phase_z is
/// [T,H,W]; every mask must be nonempty.
inline VelocityCurve global_curve(const Tensor<float>& phase_z, const std::vector<Mask>& masks) {
  if (phase_z.rank() != 3) throw std::invalid_argument("global_curve: phase_z must be [T,H,W]");
  const int T = phase_z.dim(0), H = phase_z.dim(1), W = phase_z.dim(2);
  if (int(masks.size()) != T)
    throw std::invalid_argument("global_curve: " + std::to_string(masks.size()) + " masks for " + std::to_string(T) + " frames");
  VelocityCurve out;
  out.v.reserve(std::size_t(T));
  for (int t = 0; t < T; ++t) {
    const Mask& m = masks[std::size_t(t)];
    if (m.h != H || m.w != W) throw std::invalid_argument("global_curve: mask extent mismatch at frame " + std::to_string(t));
    const float* z = phase_z.data() + std::size_t(t) * H * W;
    double sum = 0;
    int n = 0;
    for (std::size_t k = 0; k < std::size_t(H) * W; ++k)
      if (m.v[k]) {
        sum += z[k];
        ++n;
      }
    if (n == 0) throw EmptyMask(t);
    out.v.push_back(sum / n);
  }
  return out;
}

/// Peak-search windows as cycle fractions; frame boundaries are rounded
/// half-up, so the defaults on T=50 give [0,20), [20,38), [38,50).
struct PeakWindows {
  double systolic_end = 0.40;
  double diastolic_end = 0.75;
};

enum class SignConvention { systole_positive, systole_negative };

struct Peak {
  double value = 0;  // cm/s
  int frame = -1;
};

struct PeakSet {
  Peak ps, pd, pas;
  bool ps_sign_violation = false;  // flagged, never silently corrected
  bool pd_sign_violation = false;
  bool pas_sign_violation = false;
};

/// PS, PD, PAS extrema of the curve inside their windows; ties take the
/// earliest frame.
inline PeakSet extract_peaks(const VelocityCurve& curve, const PeakWindows& win = {},
                             SignConvention sign = SignConvention::systole_positive) {
  const int T = curve.frames();
  const int sys_end = int(std::lround(win.systolic_end * T));
  const int dia_end = int(std::lround(win.diastolic_end * T));
  if (!(0 < sys_end && sys_end < dia_end && dia_end < T))
    throw std::invalid_argument("extract_peaks: windows [0," + std::to_string(sys_end) + "),[" + std::to_string(sys_end) +
                                "," + std::to_string(dia_end) + "),[" + std::to_string(dia_end) + "," + std::to_string(T) +
                                ") do not partition the curve");
  const bool pos = sign == SignConvention::systole_positive;
  auto pick = [&](int lo, int hi, bool want_max) {
    Peak p{curve.v[std::size_t(lo)], lo};
    for (int t = lo + 1; t < hi; ++t) {
      const double x = curve.v[std::size_t(t)];
      if (want_max ? x > p.value : x < p.value) p = {x, t};  // strict: earliest tie wins
    }
    return p;
  };
  PeakSet out;
  out.ps = pick(0, sys_end, pos);
  out.pd = pick(sys_end, dia_end, !pos);
  out.pas = pick(dia_end, T, !pos);
  out.ps_sign_violation = pos ? out.ps.value <= 0 : out.ps.value >= 0;
  out.pd_sign_violation = pos ? out.pd.value >= 0 : out.pd.value <= 0;
  out.pas_sign_violation = pos ? out.pas.value >= 0 : out.pas.value <= 0;
  return out;
}

/// Subject-level aggregate: plain mean of per-slice curves (same length).
inline VelocityCurve mean_curve(const std::vector<VelocityCurve>& curves) {
  if (curves.empty()) throw std::invalid_argument("mean_curve: no curves");
  VelocityCurve out;
  out.v.assign(curves[0].v.size(), 0.0);
  for (const auto& c : curves) {
    if (c.v.size() != out.v.size()) throw std::invalid_argument("mean_curve: curve lengths differ");
    for (std::size_t k = 0; k < c.v.size(); ++k) out.v[k] += c.v[k];
  }
  for (auto& x : out.v) x /= double(curves.size());
  return out;
}

}  // namespace mvmseg
