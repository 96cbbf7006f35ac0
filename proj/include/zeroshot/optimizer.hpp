#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "zeroshot/errors.hpp"
#include "zeroshot/tensor.hpp"

namespace zeroshot {

struct AdamConfig {
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment accumulators, one per parameter tensor.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static AdamState init(const std::vector<Tensor>& params, AdamConfig config = {}) {
    AdamState state;
    state.config = config;
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const Tensor& p : params) {
      state.m.push_back(Tensor(p.shape()));
      state.v.push_back(Tensor(p.shape()));
    }
    return state;
  }
};

/// One bias-corrected Adam update over aligned parameter/gradient lists.
/// Non-finite gradients abort with the offending parameter's name.
inline void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                      const std::vector<std::string>& names, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw contract_error("adam_step: parameter, gradient, and state lists are misaligned");
  }
  state.step += 1;
  const AdamConfig& c = state.config;
  const double bias1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    const Tensor& g = grads[i];
    if (!p.same_shape(g)) {
      throw contract_error("adam_step: gradient shape mismatch for " +
                           (i < names.size() ? names[i] : std::to_string(i)));
    }
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double grad = g[j];
      if (!std::isfinite(grad)) {
        throw training_error("non-finite gradient in parameter " +
                             (i < names.size() ? names[i] : std::to_string(i)));
      }
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * grad;
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * grad * grad;
      const double m_hat = m[j] / bias1;
      const double v_hat = v[j] / bias2;
      p[j] -= c.alpha * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

}  // namespace zeroshot
