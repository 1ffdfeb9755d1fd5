#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mvmseg/mask.hpp"

namespace mvmseg {

struct DegenerateVariance : std::runtime_error {
  explicit DegenerateVariance(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dice overlap 2|a^b| / (|a|+|b|); a pair of empty masks agrees perfectly
/// and scores 1.
inline double dice(const Mask& a, const Mask& b) {
  if (a.h != b.h || a.w != b.w)
    throw std::invalid_argument("dice: mask extents " + std::to_string(a.h) + "x" + std::to_string(a.w) + " vs " +
                                std::to_string(b.h) + "x" + std::to_string(b.w) + " differ");
  long na = 0, nb = 0, ni = 0;
  for (std::size_t k = 0; k < a.v.size(); ++k) {
    na += a.v[k] != 0;
    nb += b.v[k] != 0;
    ni += (a.v[k] != 0) && (b.v[k] != 0);
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * double(ni) / double(na + nb);
}

/// Dice over pooled voxel counts of an aligned mask sequence (slice level
/// pools the slice's frames, subject level pools all the subject's slices).
inline double dice_pooled(const std::vector<Mask>& a, const std::vector<Mask>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("dice_pooled: sequence lengths " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + " differ");
  long na = 0, nb = 0, ni = 0;
  for (std::size_t f = 0; f < a.size(); ++f) {
    if (a[f].h != b[f].h || a[f].w != b[f].w) throw std::invalid_argument("dice_pooled: mask extents differ at frame " + std::to_string(f));
    for (std::size_t k = 0; k < a[f].v.size(); ++k) {
      na += a[f].v[k] != 0;
      nb += b[f].v[k] != 0;
      ni += (a[f].v[k] != 0) && (b[f].v[k] != 0);
    }
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * double(ni) / double(na + nb);
}

/// Mean of per-frame Dice values; the alternate slice/subject aggregation
/// kept behind a flag for sensitivity analysis.
inline double dice_mean_of_frames(const std::vector<Mask>& a, const std::vector<Mask>& b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("dice_mean_of_frames: bad sequence lengths");
  double s = 0;
  for (std::size_t f = 0; f < a.size(); ++f) s += dice(a[f], b[f]);
  return s / double(a.size());
}

namespace stats_detail {

// Continued-fraction evaluation of the regularized incomplete beta
// I_x(a, b) (modified Lentz); absolute error well below 1e-10 over the
// argument range used here.
inline double betacf(double a, double b, double x) {
  const int max_iter = 300;
  const double eps = 3e-16, fpmin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < fpmin) d = fpmin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= max_iter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::abs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::abs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) break;
  }
  return h;
}

inline double ibeta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;  // symmetry: I_x(a,b) = 1 - I_{1-x}(b,a)
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// average ranks of |values|, ties share their mean rank
inline std::vector<double> average_ranks(const std::vector<double>& abs_d) {
  const std::size_t n = abs_d.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return abs_d[i] < abs_d[j]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && abs_d[order[j + 1]] == abs_d[order[i]]) ++j;
    const double avg = (double(i + 1) + double(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace stats_detail

/// Two-sided p of Student's t with df degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
  if (!std::isfinite(t)) return 0.0;
  return stats_detail::ibeta(df / 2.0, 0.5, df / (df + t * t));
}

enum class WilcoxonMethod { auto_select, exact, normal_approx };

struct WilcoxonResult {
  double w_plus = 0, w_minus = 0, w = 0;  // w = min(w_plus, w_minus)
  double p = 1.0;
  int n = 0;  // pairs remaining after zero differences are dropped
  bool exact = false;
  bool no_differences = false;  // all differences were zero; p = 1 by convention
};

/// Paired two-sided Wilcoxon signed-rank test. Zero differences are
/// dropped (Wilcoxon's original method); |d| are ranked with average ranks
/// on ties. Exact p (full null distribution of W+ over all 2^n sign
/// assignments, evaluated by subset-sum counting) for n <= 25, normal
/// approximation with tie and continuity corrections above.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y,
                                           WilcoxonMethod method = WilcoxonMethod::auto_select) {
  if (x.size() != y.size())
    throw std::invalid_argument("wilcoxon_signed_rank: sample sizes " + std::to_string(x.size()) + " vs " +
                                std::to_string(y.size()) + " differ");
  std::vector<double> d;
  d.reserve(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double v = x[k] - y[k];
    if (v != 0.0) d.push_back(v);
  }
  WilcoxonResult out;
  if (d.empty()) {
    out.no_differences = true;
    return out;
  }
  const int n = int(d.size());
  if (n < 5)
    throw std::invalid_argument("wilcoxon_signed_rank: only " + std::to_string(n) +
                                " nonzero differences; need at least 5");
  out.n = n;

  std::vector<double> abs_d(d.size());
  for (std::size_t k = 0; k < d.size(); ++k) abs_d[k] = std::abs(d[k]);
  const std::vector<double> ranks = stats_detail::average_ranks(abs_d);
  for (std::size_t k = 0; k < d.size(); ++k) (d[k] > 0 ? out.w_plus : out.w_minus) += ranks[k];
  out.w = std::min(out.w_plus, out.w_minus);

  const bool use_exact = method == WilcoxonMethod::exact || (method == WilcoxonMethod::auto_select && n <= 25);
  if (use_exact) {
    if (n > 62) throw std::invalid_argument("wilcoxon_signed_rank: exact method limited to n <= 62");
    // doubled ranks are integers even with .5 average ranks
    std::vector<std::int64_t> r2(d.size());
    std::int64_t total_sum = 0;
    for (std::size_t k = 0; k < ranks.size(); ++k) {
      r2[k] = std::int64_t(std::llround(2.0 * ranks[k]));
      total_sum += r2[k];
    }
    std::vector<double> ways(std::size_t(total_sum) + 1, 0.0);  // counts stay < 2^62, exact in double up to 2^53; n <= 25 here
    ways[0] = 1.0;
    for (std::int64_t r : r2)
      for (std::int64_t s = total_sum; s >= r; --s) ways[std::size_t(s)] += ways[std::size_t(s - r)];
    const std::int64_t w2 = std::int64_t(std::llround(2.0 * out.w));
    double count_le = 0.0;
    for (std::int64_t s = 0; s <= w2; ++s) count_le += ways[std::size_t(s)];
    const double total = std::ldexp(1.0, n);  // 2^n, exact
    const double p = 2.0 * (count_le / total);
    out.p = p < 1.0 ? p : 1.0;
    out.exact = true;
  } else {
    const double dn = double(n);
    const double mu = dn * (dn + 1.0) / 4.0;
    double tie_term = 0.0;
    {
      std::vector<double> sorted = abs_d;
      std::sort(sorted.begin(), sorted.end());
      std::size_t i = 0;
      while (i < sorted.size()) {
        std::size_t j = i;
        while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
        const double tcount = double(j - i + 1);
        tie_term += tcount * tcount * tcount - tcount;
        i = j + 1;
      }
    }
    const double var = dn * (dn + 1.0) * (2.0 * dn + 1.0) / 24.0 - tie_term / 48.0;
    if (var <= 0.0) throw DegenerateVariance("wilcoxon_signed_rank: zero variance (all ranks tied away)");
    const double z = (out.w - mu + 0.5) / std::sqrt(var);  // continuity correction toward the mean
    out.p = std::min(1.0, 2.0 * stats_detail::normal_cdf(z));
    out.exact = false;
  }
  return out;
}

struct PearsonResult {
  double r = 0, t = 0, p = 1.0;
  int n = 0;
};

/// Sample Pearson correlation with the two-sided p-value from the
/// Student-t transform t = r sqrt((n-2)/(1-r^2)), df = n-2.
inline PearsonResult pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: sample sizes differ");
  const int n = int(x.size());
  if (n < 3) throw std::invalid_argument("pearson: need at least 3 pairs, got " + std::to_string(n));
  double mx = 0, my = 0;
  for (int k = 0; k < n; ++k) {
    mx += x[std::size_t(k)];
    my += y[std::size_t(k)];
  }
  mx /= n;
  my /= n;
  double sxx = 0, syy = 0, sxy = 0;
  for (int k = 0; k < n; ++k) {
    const double dx = x[std::size_t(k)] - mx, dy = y[std::size_t(k)] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw DegenerateVariance("pearson: zero variance in a sample");
  PearsonResult out;
  out.n = n;
  out.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  const double df = double(n - 2);
  const double one_minus_r2 = 1.0 - out.r * out.r;
  if (one_minus_r2 <= 0.0) {
    out.t = std::numeric_limits<double>::infinity();
    out.p = 0.0;
    return out;
  }
  out.t = out.r * std::sqrt(df / one_minus_r2);
  out.p = student_t_two_sided_p(out.t, df);
  return out;
}

struct BlandAltmanResult {
  double mean_diff = 0, sd = 0, loa_low = 0, loa_high = 0;
  std::vector<int> outliers;                      // indices with d outside the limits
  std::vector<std::pair<double, double>> points;  // (pair mean, difference), plot-ready
  int n = 0;
};

/// Limits-of-agreement analysis of paired differences d = x - y:
/// mean(d) +/- 1.96 * sd(d) with the sample (n-1) standard deviation.
inline BlandAltmanResult bland_altman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("bland_altman: sample sizes differ");
  const int n = int(x.size());
  if (n < 2) throw std::invalid_argument("bland_altman: need at least 2 pairs, got " + std::to_string(n));
  BlandAltmanResult out;
  out.n = n;
  out.points.reserve(std::size_t(n));
  double mean = 0;
  for (int k = 0; k < n; ++k) {
    const double d = x[std::size_t(k)] - y[std::size_t(k)];
    out.points.push_back({(x[std::size_t(k)] + y[std::size_t(k)]) / 2.0, d});
    mean += d;
  }
  mean /= n;
  double ss = 0;
  for (const auto& [m, d] : out.points) ss += (d - mean) * (d - mean);
  out.mean_diff = mean;
  out.sd = std::sqrt(ss / double(n - 1));
  out.loa_low = mean - 1.96 * out.sd;
  out.loa_high = mean + 1.96 * out.sd;
  for (int k = 0; k < n; ++k) {
    const double d = out.points[std::size_t(k)].second;
    if (d < out.loa_low || d > out.loa_high) out.outliers.push_back(k);
  }
  return out;
}

}  // namespace mvmseg
