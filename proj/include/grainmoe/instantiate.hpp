// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "grainmoe/configplan.hpp"
#include "grainmoe/model.hpp"

namespace grainmoe {

/// Model configuration that realizes `spec` exactly (same parameter set).
inline ModelConfig model_config_from_arch(const ArchSpec& spec, std::size_t n_heads,
                                          std::size_t seq_len, SoftmaxOrder order) {
  spec.validate();
  ModelConfig cfg;
  cfg.n_layers = spec.n_layers;
  cfg.d_model = spec.d_model;
  cfg.n_heads = n_heads;
  cfg.vocab_size = spec.vocab_size;
  cfg.seq_len = seq_len;
  cfg.tied_embeddings = spec.tied_embeddings;
  cfg.moe.n_experts = spec.effective_experts();
  cfg.moe.top_k = spec.effective_top_k();
  cfg.moe.d_model = spec.d_model;
  cfg.moe.d_expert = spec.d_expert;
  cfg.moe.softmax_order = order;
  return cfg;
}

}  // namespace grainmoe
