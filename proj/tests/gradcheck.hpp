#pragma once

// Central finite-difference gradient checker. Independent of the tape: it
// only re-runs the caller's forward closure at perturbed parameter values.
//
// Piecewise-linear models (relu, max-pooling) have kinks; when the FD
// stencil straddles one, the central difference does not estimate the
// gradient at the evaluation point at all. For each element the checker
// accepts the base step when analytic and FD agree; otherwise it bounds the
// possible kink contribution by the one-sided slope disagreement and only
// refines the step while that bound exceeds the tolerance. A disagreement
// across a trustworthy (smooth) stencil is a real failure at any step size,
// so refinement cannot mask a wrong gradient.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mvmseg/tensor.hpp"

namespace gradcheck {

struct Report {
  double max_rel_err = 0.0;
  std::string worst;
  int checked = 0;
  int refined = 0;  // elements whose base-step stencil straddled a kink
};

inline double rel_err(double a, double b, double floor_) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor_});
}

// forward() must rebuild the whole computation from the current parameter
// values and return the scalar loss. params[i].grad() must already hold the
// analytic gradients at the unperturbed point. The relative-error
// denominator is floored so near-zero gradients are compared absolutely.
inline Report check(std::vector<mvmseg::Tensor<double>>& params, const std::function<double()>& forward,
                    double h = 1e-3, double tol = 1e-4, double denom_floor = 1e-2) {
  Report rep;
  const double f0 = forward();
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& t = params[p];
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double orig = t.data()[k];
      const double an = t.grad()[k];
      double err = 0.0;
      double step = h;
      for (int attempt = 0; attempt < 4; ++attempt, step /= 64.0) {
        t.data()[k] = orig + step;
        const double fp = forward();
        t.data()[k] = orig - step;
        const double fm = forward();
        t.data()[k] = orig;
        const double fd = (fp - fm) / (2.0 * step);
        const double denom = std::max({std::abs(an), std::abs(fd), denom_floor});
        err = std::abs(an - fd) / denom;
        if (err < tol) break;
        // disagreement: trust the stencil only if a kink inside it could
        // not account for the error (central-diff kink error <= |sp-sm|/2)
        const double sp = (fp - f0) / step, sm = (f0 - fm) / step;
        const double kink_bound = 0.5 * std::abs(sp - sm) / denom;
        if (kink_bound <= tol) break;  // smooth enough: real failure
        if (attempt == 0) ++rep.refined;
      }
      ++rep.checked;
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst = "param " + std::to_string(p) + " elem " + std::to_string(k) + ": analytic=" + std::to_string(an);
      }
    }
  }
  return rep;
}

}  // namespace gradcheck
