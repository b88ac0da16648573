// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>

#include "grainmoe/tensor.hpp"

namespace grainmoe {

enum class ScheduleKind { CosineWithWarmup, ContinuedPretrain };

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::CosineWithWarmup;
  double peak_lr = 2e-4;
  double end_lr = 2e-5;
  std::size_t steps = 0;
  std::size_t warmup_steps = 0;

  void validate() const {
    if (steps == 0) throw ConfigError("schedule needs at least one step");
    if (!(end_lr <= peak_lr) || end_lr < 0.0) throw ConfigError("schedule requires 0 <= end_lr <= peak_lr");
    if (warmup_steps >= steps) throw ConfigError("warmup must be shorter than the schedule");
  }
};

/// Main phase: linear warmup over ceil(warmup_frac * steps) steps, then cosine
/// decay to end_ratio * peak.
inline ScheduleSpec main_schedule(double peak_lr, std::size_t steps, double warmup_frac,
                                  double end_ratio = 0.1) {
  if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) {
    throw ConfigError("warmup_frac must lie in (0, 1)");
  }
  ScheduleSpec s;
  s.kind = ScheduleKind::CosineWithWarmup;
  s.peak_lr = peak_lr;
  s.end_lr = end_ratio * peak_lr;
  s.steps = steps;
  s.warmup_steps = static_cast<std::size_t>(std::ceil(warmup_frac * static_cast<double>(steps) - 1e-9));
  s.validate();
  return s;
}

/// Second phase resumed from a checkpoint: cosine from the previous final LR
/// down to a tenth of it, no warmup, over budget_frac of the prior steps.
inline ScheduleSpec continued_schedule(double prior_end_lr, std::size_t prior_steps,
                                       double budget_frac = 0.1) {
  if (!(prior_end_lr > 0.0)) throw ConfigError("continued schedule needs prior_end_lr > 0");
  if (!(budget_frac > 0.0)) throw ConfigError("budget_frac must be positive");
  ScheduleSpec s;
  s.kind = ScheduleKind::ContinuedPretrain;
  s.peak_lr = prior_end_lr;
  s.end_lr = 0.1 * prior_end_lr;
  s.steps = static_cast<std::size_t>(std::llround(budget_frac * static_cast<double>(prior_steps)));
  s.warmup_steps = 0;
  s.validate();
  return s;
}

inline double lr_at(std::size_t step, const ScheduleSpec& s) {
  if (step > s.steps) {
    throw ConfigError("step " + std::to_string(step) + " outside schedule of " +
                      std::to_string(s.steps) + " steps");
  }
  if (step < s.warmup_steps) {
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          static_cast<double>(s.steps - s.warmup_steps);
  return s.end_lr + 0.5 * (1.0 + std::cos(std::numbers::pi * progress)) * (s.peak_lr - s.end_lr);
}

}  // namespace grainmoe
