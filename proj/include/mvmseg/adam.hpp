#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvmseg/tensor.hpp"

namespace mvmseg {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second-moment buffers, one pair per parameter tensor, plus the
/// shared step counter. Moments are zero-initialized on first use.
template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::int64_t t = 0;
};

/// One Adam update over an ordered parameter list. Every parameter must
/// carry a gradient; a NaN anywhere in the gradients rejects the whole
/// update (the optimizer state is left untouched).
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, const AdamOptions& opt = {}) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
      state.m[p].assign(params[p].size(), T(0));
      state.v[p].assign(params[p].size(), T(0));
    }
  }
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: state holds " + std::to_string(state.m.size()) + " moment buffers for " +
                                std::to_string(params.size()) + " parameters");
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!params[p].requires_grad())
      throw std::invalid_argument("adam_step: parameter " + std::to_string(p) + " has no gradient buffer");
    if (state.m[p].size() != params[p].size())
      throw std::invalid_argument("adam_step: moment buffer " + std::to_string(p) + " size mismatch");
    const T* g = params[p].grad();
    for (std::size_t k = 0; k < params[p].size(); ++k)
      if (std::isnan(double(g[k])))
        throw std::runtime_error("adam_step: NaN gradient in parameter " + std::to_string(p) + " at element " +
                                 std::to_string(k) + "; update rejected");
  }

  state.t += 1;
  const T b1 = T(opt.beta1), b2 = T(opt.beta2);
  const T bc1 = T(1.0 - std::pow(opt.beta1, double(state.t)));
  const T bc2 = T(1.0 - std::pow(opt.beta2, double(state.t)));
  const T lr = T(opt.lr), eps = T(opt.eps);
  for (std::size_t p = 0; p < params.size(); ++p) {
    T* w = params[p].data();
    const T* g = params[p].grad();
    T* m = state.m[p].data();
    T* v = state.v[p].data();
    for (std::size_t k = 0; k < params[p].size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      const T mhat = m[k] / bc1;
      const T vhat = v[k] / bc2;
      w[k] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace mvmseg
