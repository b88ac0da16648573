// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "grainmoe/autodiff.hpp"

namespace grainmoe {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  // Same comparison with the denominator floored at 1e-5 instead.
  double max_rel_error_floor5 = 0.0;
  std::size_t entries_checked = 0;
};

/// Compares reverse-mode gradients of the scalar `f()` against central
/// differences (f(x+h) - f(x-h)) / 2h for every entry of every parameter.
/// Relative error uses max(|a|, |b|, 1e-8) as the denominator.
template <typename T, typename F>
GradCheckResult grad_check(F&& f, std::vector<Var<T>> params, double h = 1e-5) {
  for (auto& p : params) p.zero_grad();
  Var<T> y = f();
  if (!std::isfinite(static_cast<double>(y.item()))) {
    throw NumericError("grad_check: non-finite objective");
  }
  backward(y);
  std::vector<Tensor<T>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());

  auto eval = [&] {
    NoGradGuard guard;
    const double v = static_cast<double>(f().item());
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite objective");
    return v;
  };

  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& value = params[pi].mutable_value();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const T saved = value[i];
      value[i] = static_cast<T>(static_cast<double>(saved) + h);
      const double fp = eval();
      value[i] = static_cast<T>(static_cast<double>(saved) - h);
      const double fm = eval();
      value[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = static_cast<double>(analytic[pi][i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++res.entries_checked;
      res.max_rel_error_floor5 =
          std::max(res.max_rel_error_floor5, std::abs(a - numeric) / std::max(denom, 1e-5));
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = pi;
        res.worst_index = i;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace grainmoe
