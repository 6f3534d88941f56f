#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "metaphor/error.hpp"
#include "metaphor/tensor.hpp"

namespace metaphor {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

template <std::floating_point Real>
struct AdamState {
  AdamOptions options;
  std::vector<Tensor<Real>> params;
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
  std::uint64_t t = 0;
};

template <std::floating_point Real>
AdamState<Real> adam_init(std::vector<Tensor<Real>> params, const AdamOptions& options = {}) {
  if (!(options.lr > 0.0)) throw ParameterError("adam: learning rate must be positive");
  if (!(options.beta1 >= 0.0 && options.beta1 < 1.0)) throw ParameterError("adam: beta1 must lie in [0, 1)");
  if (!(options.beta2 >= 0.0 && options.beta2 < 1.0)) throw ParameterError("adam: beta2 must lie in [0, 1)");
  if (!(options.eps > 0.0)) throw ParameterError("adam: eps must be positive");
  if (!(options.clip_norm >= 0.0)) throw ParameterError("adam: clip_norm must be non-negative");
  AdamState<Real> state;
  state.options = options;
  for (const auto& p : params) {
    state.m.emplace_back(p.size(), Real(0));
    state.v.emplace_back(p.size(), Real(0));
  }
  state.params = std::move(params);
  return state;
}

/// One bias-corrected Adam update from the gradients currently held by the
/// parameters. Gradients are left in place; callers zero them between batches.
template <std::floating_point Real>
void adam_step(AdamState<Real>& state) {
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    if (!state.params[i].has_grad()) {
      throw ContractError("adam_step: parameter " + std::to_string(i) + " of shape " +
                          shape_str(state.params[i].shape()) + " has no gradient");
    }
  }
  const AdamOptions& o = state.options;
  double clip_scale = 1.0;
  if (o.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& p : state.params) {
      for (Real gv : p.grad()) sq += static_cast<double>(gv) * static_cast<double>(gv);
    }
    const double norm = std::sqrt(sq);
    if (norm > o.clip_norm) clip_scale = o.clip_norm / norm;
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    auto& p = state.params[i];
    auto grad = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = static_cast<double>(grad[j]) * clip_scale;
      const double mj = o.beta1 * static_cast<double>(m[j]) + (1.0 - o.beta1) * g;
      const double vj = o.beta2 * static_cast<double>(v[j]) + (1.0 - o.beta2) * g * g;
      m[j] = static_cast<Real>(mj);
      v[j] = static_cast<Real>(vj);
      const double m_hat = mj / c1;
      const double v_hat = vj / c2;
      p[j] = static_cast<Real>(static_cast<double>(p[j]) - o.lr * m_hat / (std::sqrt(v_hat) + o.eps));
    }
  }
}

template <std::floating_point Real>
void zero_grads(std::vector<Tensor<Real>>& params) {
  for (auto& p : params) {
    p.ensure_grad();
    p.zero_grad();
  }
}

}  // namespace metaphor
