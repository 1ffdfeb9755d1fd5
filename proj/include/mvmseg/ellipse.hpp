#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvmseg/mask.hpp"

namespace mvmseg {

struct Point {
  double x = 0, y = 0;
};

struct FitFailed : std::runtime_error {
  explicit FitFailed(const std::string& msg) : std::runtime_error(msg) {}
};

/// Axis-aligned-after-rotation ellipse: center, semi-axes a >= b > 0,
/// rotation of the major axis in [0, pi). Coordinates follow the pixel
/// convention x = column, y = row, integer pixel centers.
struct Ellipse {
  double cx = 0, cy = 0;
  double a = 0, b = 0;
  double theta = 0;

  Point at(double phi) const {
    const double ct = std::cos(theta), st = std::sin(theta);
    const double u = a * std::cos(phi), v = b * std::sin(phi);
    return {cx + u * ct - v * st, cy + u * st + v * ct};
  }

  /// < 1 inside, 1 on the curve, > 1 outside.
  double implicit(double x, double y) const {
    const double ct = std::cos(theta), st = std::sin(theta);
    const double dx = x - cx, dy = y - cy;
    const double u = dx * ct + dy * st, v = -dx * st + dy * ct;
    return (u / a) * (u / a) + (v / b) * (v / b);
  }

  bool contains(double x, double y) const { return implicit(x, y) <= 1.0; }

  /// Ramanujan's perimeter approximation.
  double perimeter() const {
    const double h3 = 3.0 * ((a - b) / (a + b)) * ((a - b) / (a + b));
    return M_PI * (a + b) * (1.0 + h3 / (10.0 + std::sqrt(4.0 - h3)));
  }
};

/// a >= b and theta in [0, pi).
inline Ellipse canonicalized(Ellipse e) {
  if (e.b > e.a) {
    std::swap(e.a, e.b);
    e.theta += M_PI / 2.0;
  }
  e.theta = std::fmod(e.theta, M_PI);
  if (e.theta < 0) e.theta += M_PI;
  if (e.theta == M_PI) e.theta = 0;
  return e;
}

/// Evenly spaced parametric samples along the curve; n >= 4 samples per
/// pixel of perimeter unless a larger count is requested.
inline std::vector<Point> ellipse_samples(const Ellipse& e, int min_count = 32) {
  const int n = std::max(min_count, int(std::ceil(4.0 * e.perimeter())));
  std::vector<Point> pts;
  pts.reserve(std::size_t(n));
  for (int k = 0; k < n; ++k) pts.push_back(e.at(2.0 * M_PI * k / n));
  return pts;
}

namespace ellipse_detail {

// Geometric form of the conic Axx + Bxy + Cyy + Dx + Ey + F = 0, which must
// describe a real ellipse.
inline Ellipse conic_to_ellipse(double A, double B, double C, double D, double E, double F) {
  const double den = 4.0 * A * C - B * B;
  if (!(den > 0)) throw FitFailed("fit_ellipse: conic is not an ellipse (4AC - B^2 <= 0)");
  const double cx = (B * E - 2.0 * C * D) / den;
  const double cy = (B * D - 2.0 * A * E) / den;
  const double f0 = A * cx * cx + B * cx * cy + C * cy * cy + D * cx + E * cy + F;
  // eigen decomposition of [[A, B/2], [B/2, C]]
  const double half = (A + C) / 2.0;
  const double disc = std::sqrt((A - C) * (A - C) / 4.0 + B * B / 4.0);
  const double l_small = half - disc, l_big = half + disc;
  const double sa = -f0 / l_small, sb = -f0 / l_big;
  if (!(sa > 0) || !(sb > 0) || !std::isfinite(sa) || !std::isfinite(sb))
    throw FitFailed("fit_ellipse: degenerate conic (non-positive axis length)");
  // major-axis direction = eigenvector of the smaller eigenvalue
  double vx, vy;
  if (std::abs(B) > 1e-300) {
    vx = B / 2.0;
    vy = l_small - A;
  } else if (A <= C) {
    vx = 1;
    vy = 0;
  } else {
    vx = 0;
    vy = 1;
  }
  Ellipse e;
  e.cx = cx;
  e.cy = cy;
  e.a = std::sqrt(sa);
  e.b = std::sqrt(sb);
  e.theta = std::atan2(vy, vx);
  return canonicalized(e);
}

}  // namespace ellipse_detail

/// Direct ellipse-specific least-squares conic fit (constraint
/// 4AC - B^2 = 1, solved through the stabilized 3x3 reduced eigenproblem),
/// guaranteed to return an ellipse whenever it returns at all. Needs at
/// least 6 points with non-degenerate scatter.
inline Ellipse fit_ellipse(const std::vector<Point>& pts) {
  const int n = int(pts.size());
  if (n < 6) throw FitFailed("fit_ellipse: need at least 6 points, got " + std::to_string(n));
  double mx = 0, my = 0;
  for (const auto& p : pts) {
    mx += p.x;
    my += p.y;
  }
  mx /= n;
  my /= n;

  Eigen::MatrixXd d1(n, 3), d2(n, 3);
  for (int i = 0; i < n; ++i) {
    const double x = pts[std::size_t(i)].x - mx, y = pts[std::size_t(i)].y - my;
    d1(i, 0) = x * x;
    d1(i, 1) = x * y;
    d1(i, 2) = y * y;
    d2(i, 0) = x;
    d2(i, 1) = y;
    d2(i, 2) = 1.0;
  }
  const Eigen::Matrix3d s1 = d1.transpose() * d1;
  const Eigen::Matrix3d s2 = d1.transpose() * d2;
  const Eigen::Matrix3d s3 = d2.transpose() * d2;
  Eigen::FullPivLU<Eigen::Matrix3d> lu(s3);
  if (!lu.isInvertible()) throw FitFailed("fit_ellipse: rank-deficient scatter (collinear or repeated points)");
  const Eigen::Matrix3d t = -lu.solve(s2.transpose());
  const Eigen::Matrix3d m = s1 + s2 * t;
  Eigen::Matrix3d mr;  // premultiplied by C1^-1 for constraint 4AC - B^2 = 1
  mr.row(0) = m.row(2) / 2.0;
  mr.row(1) = -m.row(1);
  mr.row(2) = m.row(0) / 2.0;

  Eigen::EigenSolver<Eigen::Matrix3d> es(mr);
  int pick = -1;
  for (int i = 0; i < 3; ++i) {
    if (std::abs(es.eigenvalues()(i).imag()) > 1e-10 * (1.0 + std::abs(es.eigenvalues()(i).real()))) continue;
    const Eigen::Vector3d v = es.eigenvectors().col(i).real();
    if (4.0 * v(0) * v(2) - v(1) * v(1) > 0) {
      pick = i;
      break;
    }
  }
  if (pick < 0) throw FitFailed("fit_ellipse: no eigenvector satisfies the ellipse constraint");
  const Eigen::Vector3d a1 = es.eigenvectors().col(pick).real();
  const Eigen::Vector3d a2 = t * a1;

  // un-shift the centering x -> x - mx, y -> y - my
  const double A = a1(0), B = a1(1), C = a1(2);
  const double D = a2(0) - 2.0 * A * mx - B * my;
  const double E = a2(1) - B * mx - 2.0 * C * my;
  const double F = a2(2) + A * mx * mx + B * mx * my + C * my * my - a2(0) * mx - a2(1) * my;
  return ellipse_detail::conic_to_ellipse(A, B, C, D, E, F);
}

/// Marks every pixel whose center lies within width/2 of the curve,
/// approximated by dense parametric sampling (>= 4 samples per pixel of
/// perimeter), clipped to the image bounds.
inline Mask rasterize_ring(const Ellipse& e, double width, int h, int w) {
  if (width < 1.0) throw std::invalid_argument("rasterize_ring: width " + std::to_string(width) + " < 1");
  Mask out(h, w);
  const double r = width / 2.0;
  for (const auto& p : ellipse_samples(e)) {
    const int i0 = int(std::ceil(p.y - r)), i1 = int(std::floor(p.y + r));
    const int j0 = int(std::ceil(p.x - r)), j1 = int(std::floor(p.x + r));
    for (int i = std::max(i0, 0); i <= std::min(i1, h - 1); ++i)
      for (int j = std::max(j0, 0); j <= std::min(j1, w - 1); ++j) {
        const double dx = j - p.x, dy = i - p.y;
        if (dx * dx + dy * dy <= r * r) out.at(i, j) = 1;
      }
  }
  return out;
}

}  // namespace mvmseg
