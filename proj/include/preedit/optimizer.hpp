#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "preedit/params.hpp"

namespace preedit {

// Adam with bias correction; beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
struct OptimizerState {
  std::vector<Tensor> m, v;
  int64_t t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

inline void adam_init(OptimizerState& st, const ParamStore& params) {
  st.m.clear();
  st.v.clear();
  for (int i = 0; i < params.size(); ++i) {
    st.m.emplace_back(params.value(i).shape());
    st.v.emplace_back(params.value(i).shape());
  }
  st.t = 0;
}

// grads[i] aligned with params.value(i); non-finite gradients abort naming
// the parameter block
inline void adam_step(OptimizerState& st, ParamStore& params,
                      const std::vector<Tensor>& grads, double lr) {
  if (static_cast<int>(grads.size()) != params.size())
    throw std::invalid_argument("adam: gradient count mismatch");
  st.t += 1;
  const double c1 = 1.0 - std::pow(st.beta1, double(st.t));
  const double c2 = 1.0 - std::pow(st.beta2, double(st.t));
  for (int i = 0; i < params.size(); ++i) {
    Tensor& w = params.value(i);
    const Tensor& g = grads[static_cast<size_t>(i)];
    Tensor& m = st.m[static_cast<size_t>(i)];
    Tensor& v = st.v[static_cast<size_t>(i)];
    for (int64_t j = 0; j < w.numel(); ++j) {
      const double gj = g[j];
      if (!std::isfinite(gj))
        throw std::runtime_error("adam: non-finite gradient in parameter block '" +
                                 params.name(i) + "'");
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * gj;
      v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * gj * gj;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
}

}  // namespace preedit
