// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "grainmoe/autodiff.hpp"

namespace grainmoe {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

/// One optimizer slot: the parameter and whether weight decay applies.
template <typename T>
struct OptimParam {
  Var<T> var;
  bool decay = true;
};

template <typename T>
struct AdamWState {
  std::vector<Tensor<T>> m, v;
  std::size_t step = 0;

  void reset() {
    m.clear();
    v.clear();
    step = 0;
  }
};

/// Decoupled weight decay Adam with bias correction:
///   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
/// Update arithmetic runs in double; moments are stored as T.
template <typename T>
void adamw_step(std::vector<OptimParam<T>>& params, AdamWState<T>& state, double lr,
                const AdamWConfig& cfg) {
  for (auto& p : params) {
    if (!p.var.grad().all_finite()) throw NumericError("non-finite gradient");
  }
  if (state.m.empty()) {
    for (auto& p : params) {
      state.m.emplace_back(p.var.shape());
      state.v.emplace_back(p.var.shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adamw: optimizer state size mismatch");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& theta = params[i].var.mutable_value();
    const auto& g = params[i].var.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const double wd = params[i].decay ? cfg.weight_decay : 0.0;
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double m_hat = mj / bc1, v_hat = vj / bc2;
      const double th = static_cast<double>(theta[j]);
      theta[j] = static_cast<T>(th - lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + wd * th));
    }
  }
}

/// Global L2 norm over all gradients.
template <typename T>
double global_grad_norm(const std::vector<OptimParam<T>>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (T g : p.var.grad().data()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

/// Rescales all gradients so their global norm is at most `threshold`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<OptimParam<T>>& params, double threshold = 1.0) {
  const double norm = global_grad_norm(params);
  if (norm > threshold) {
    const double s = threshold / norm;
    for (auto& p : params) {
      for (auto& g : p.var.mutable_grad().vec()) g = static_cast<T>(static_cast<double>(g) * s);
    }
  }
  return norm;
}

}  // namespace grainmoe
