// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "grainmoe/gradcheck.hpp"
#include "grainmoe/model.hpp"

namespace grainmoe {

/// Two-layer model small enough to finite-difference every parameter.
inline ModelConfig tiny_check_config(std::size_t top_k, SoftmaxOrder order, double capacity_factor) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.vocab_size = 11;
  cfg.seq_len = 6;
  cfg.rotary_pct = 0.5;
  cfg.attn_dropout_p = 0.0;
  cfg.init_std = 0.5;
  cfg.moe.n_experts = std::max<std::size_t>(4, top_k + 2);
  cfg.moe.top_k = top_k;
  cfg.moe.d_model = 16;
  cfg.moe.d_expert = 4;
  cfg.moe.capacity_factor = capacity_factor;
  cfg.moe.softmax_order = order;
  return cfg;
}

/// Full-model objective (task + aux + z) checked against central differences.
/// Routing is frozen by the seed; a perturbation that flips a top-k choice
/// would show up as a large error, so the default inputs keep margins wide.
template <typename T>
GradCheckResult model_grad_check(const ModelConfig& cfg, std::uint64_t seed, double h = 1e-5) {
  auto params = init_params<T>(cfg, seed);
  std::mt19937_64 rng(mix_seed(seed, 99));
  std::vector<std::size_t> tokens(cfg.seq_len), targets(cfg.seq_len);
  for (auto& t : tokens) t = static_cast<std::size_t>(rng() % cfg.vocab_size);
  for (auto& t : targets) t = static_cast<std::size_t>(rng() % cfg.vocab_size);
  auto objective = [&] {
    auto fr = forward(cfg, params, tokens);
    return model_loss(cfg, fr, targets).total;
  };
  return grad_check<T>(objective, params.vars(), h);
}

}  // namespace grainmoe
