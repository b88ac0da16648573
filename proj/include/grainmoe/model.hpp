// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "grainmoe/moe.hpp"
#include "grainmoe/ops.hpp"

namespace grainmoe {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 16;
  std::size_t n_heads = 2;
  std::size_t vocab_size = 11;
  std::size_t seq_len = 16;
  double rotary_pct = 0.5;
  double attn_dropout_p = 0.1;
  double init_std = 0.01;
  bool tied_embeddings = false;
  MoEConfig moe;

  std::size_t d_head() const { return n_heads ? d_model / n_heads : 0; }

  void validate() const {
    if (n_layers == 0) throw ConfigError("n_layers must be at least 1");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("n_heads must divide d_model");
    }
    if (vocab_size < 2) throw ConfigError("vocab_size must be at least 2");
    if (seq_len == 0) throw ConfigError("seq_len must be positive");
    if (!(rotary_pct >= 0.0 && rotary_pct <= 1.0)) {
      throw ConfigError("rotary_pct must lie in [0, 1]");
    }
    const double span = rotary_pct * static_cast<double>(d_head());
    const auto rounded = static_cast<long long>(std::llround(span));
    if (std::abs(span - static_cast<double>(rounded)) > 1e-9 || rounded % 2 != 0) {
      throw ConfigError("rotary span rotary_pct * d_head must be an even integer");
    }
    if (!(attn_dropout_p >= 0.0 && attn_dropout_p < 1.0)) {
      throw ConfigError("attn_dropout_p must lie in [0, 1)");
    }
    if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
    if (moe.d_model != d_model) throw ConfigError("moe.d_model must equal d_model");
    moe.validate();
  }
};

template <typename T>
struct LayerParams {
  Var<T> attn_norm_gain, attn_norm_bias;
  Var<T> wq, wk, wv, wo;  // [d_model x d_model]
  Var<T> moe_norm_gain, moe_norm_bias;
  Var<T> router;  // [d_model x n_experts]
  std::vector<ExpertWeights<T>> experts;
};

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
  bool decay;  // false for norm gains and biases
};

template <typename T>
struct ModelParams {
  Var<T> embed;    // [vocab x d_model]
  Var<T> unembed;  // [d_model x vocab]; undefined when embeddings are tied
  std::vector<LayerParams<T>> layers;
  Var<T> final_norm_gain, final_norm_bias;

  /// Every trainable tensor in a fixed order (also the checkpoint order).
  std::vector<NamedParam<T>> named() const {
    std::vector<NamedParam<T>> out;
    out.push_back({"embed", embed, true});
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& L = layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      out.push_back({p + "attn_norm.gain", L.attn_norm_gain, false});
      out.push_back({p + "attn_norm.bias", L.attn_norm_bias, false});
      out.push_back({p + "attn.wq", L.wq, true});
      out.push_back({p + "attn.wk", L.wk, true});
      out.push_back({p + "attn.wv", L.wv, true});
      out.push_back({p + "attn.wo", L.wo, true});
      out.push_back({p + "moe_norm.gain", L.moe_norm_gain, false});
      out.push_back({p + "moe_norm.bias", L.moe_norm_bias, false});
      out.push_back({p + "moe.router", L.router, true});
      for (std::size_t e = 0; e < L.experts.size(); ++e) {
        const std::string q = p + "moe.experts." + std::to_string(e) + ".";
        out.push_back({q + "w_gate", L.experts[e].w_gate, true});
        out.push_back({q + "w_up", L.experts[e].w_up, true});
        out.push_back({q + "w_down", L.experts[e].w_down, true});
      }
    }
    out.push_back({"final_norm.gain", final_norm_gain, false});
    out.push_back({"final_norm.bias", final_norm_bias, false});
    if (unembed.defined()) out.push_back({"unembed", unembed, true});
    return out;
  }

  std::vector<Var<T>> vars() const {
    std::vector<Var<T>> out;
    for (auto& np : named()) out.push_back(np.var);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& np : named()) n += np.var.size();
    return n;
  }
};

/// N(0, std^2) entries drawn from `rng`.
template <typename T>
Tensor<T> normal_tensor(Shape shape, double std, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std);
  for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
  return t;
}

/// Weight matrices ~ N(0, init_std^2); norm gains 1, biases 0. Draw order is
/// the named() order, so the result depends only on (cfg, seed).
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg.d_model;
  auto w = [&](Shape s) { return Var<T>::parameter(normal_tensor<T>(std::move(s), cfg.init_std, rng)); };
  auto ones = [&] { return Var<T>::parameter(Tensor<T>(Shape{d}, T{1})); };
  auto zeros = [&] { return Var<T>::parameter(Tensor<T>(Shape{d}, T{0})); };

  ModelParams<T> p;
  p.embed = w({cfg.vocab_size, d});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerParams<T> L;
    L.attn_norm_gain = ones();
    L.attn_norm_bias = zeros();
    L.wq = w({d, d});
    L.wk = w({d, d});
    L.wv = w({d, d});
    L.wo = w({d, d});
    L.moe_norm_gain = ones();
    L.moe_norm_bias = zeros();
    L.router = w({d, cfg.moe.n_experts});
    for (std::size_t e = 0; e < cfg.moe.n_experts; ++e) {
      ExpertWeights<T> ew;
      ew.w_gate = w({d, cfg.moe.d_expert});
      ew.w_up = w({d, cfg.moe.d_expert});
      ew.w_down = w({cfg.moe.d_expert, d});
      L.experts.push_back(std::move(ew));
    }
    p.layers.push_back(std::move(L));
  }
  p.final_norm_gain = ones();
  p.final_norm_bias = zeros();
  if (!cfg.tied_embeddings) p.unembed = w({d, cfg.vocab_size});
  return p;
}

struct ForwardOptions {
  bool train = false;               // enables attention dropout
  std::uint64_t dropout_seed = 0;
  std::optional<std::size_t> capacity_override;  // replaces CF-derived capacity
};

template <typename T>
struct ForwardResult {
  Var<T> logits;  // [T x vocab]
  Var<T> aux;     // mean over layers, unscaled
  Var<T> z;       // mean over layers, unscaled
  std::vector<RoutingDecision> decisions;  // one per layer
  double dropped_fraction = 0.0;           // mean over layers
};

/// Rows per attention block: a single sequence when the input fits in
/// seq_len, otherwise packed sequences of exactly seq_len tokens.
inline std::size_t attention_block(const ModelConfig& cfg, std::size_t n_tokens) {
  if (n_tokens <= cfg.seq_len) return n_tokens;
  if (n_tokens % cfg.seq_len != 0) {
    throw ShapeError("token count " + std::to_string(n_tokens) +
                     " is not a multiple of seq_len " + std::to_string(cfg.seq_len));
  }
  return cfg.seq_len;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined word
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Pre-norm causal attention sublayer output (before the residual add).
template <typename T>
Var<T> attention_block_forward(const ModelConfig& cfg, const LayerParams<T>& L, const Var<T>& h,
                               const std::vector<std::size_t>& positions, std::size_t block,
                               const ForwardOptions& opt, std::uint64_t seed) {
  Var<T> x = layer_norm(h, L.attn_norm_gain, L.attn_norm_bias);
  Var<T> q = apply_rope(matmul(x, L.wq), positions, cfg.n_heads, cfg.rotary_pct);
  Var<T> k = apply_rope(matmul(x, L.wk), positions, cfg.n_heads, cfg.rotary_pct);
  Var<T> v = matmul(x, L.wv);
  const double p = opt.train ? cfg.attn_dropout_p : 0.0;
  return matmul(causal_attention(q, k, v, cfg.n_heads, block, p, seed), L.wo);
}

template <typename T>
ForwardResult<T> forward(const ModelConfig& cfg, const ModelParams<T>& params,
                         const std::vector<std::size_t>& tokens, const ForwardOptions& opt = {}) {
  if (tokens.empty()) throw ShapeError("forward: empty token list");
  for (auto id : tokens) {
    if (id >= cfg.vocab_size) {
      throw ConfigError("token id " + std::to_string(id) + " out of range for vocab " +
                        std::to_string(cfg.vocab_size));
    }
  }
  const std::size_t n_tok = tokens.size();
  const std::size_t block = attention_block(cfg, n_tok);
  std::vector<std::size_t> positions(n_tok);
  for (std::size_t t = 0; t < n_tok; ++t) positions[t] = t % block;

  ForwardResult<T> res;
  Var<T> h = gather_rows(params.embed, tokens);
  std::vector<Var<T>> aux_terms, z_terms;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& L = params.layers[l];
    h = add(h, attention_block_forward(cfg, L, h, positions, block, opt,
                                       mix_seed(opt.dropout_seed, l)));
    MoELayer<T> layer(cfg.moe, L.router, L.experts);
    Var<T> x = layer_norm(h, L.moe_norm_gain, L.moe_norm_bias);
    auto mo = moe_forward(x, layer, opt.capacity_override);
    h = add(h, mo.output);
    aux_terms.push_back(mo.aux);
    z_terms.push_back(mo.z);
    res.dropped_fraction += mo.decision.dropped_fraction();
    res.decisions.push_back(std::move(mo.decision));
  }
  const T inv_layers = T{1} / static_cast<T>(params.layers.size());
  Var<T> aux = aux_terms[0], z = z_terms[0];
  for (std::size_t l = 1; l < aux_terms.size(); ++l) {
    aux = add(aux, aux_terms[l]);
    z = add(z, z_terms[l]);
  }
  res.aux = scale(aux, inv_layers);
  res.z = scale(z, inv_layers);
  res.dropped_fraction /= static_cast<double>(params.layers.size());

  Var<T> x = layer_norm(h, params.final_norm_gain, params.final_norm_bias);
  res.logits = params.unembed.defined() ? matmul(x, params.unembed)
                                        : matmul(x, transpose(params.embed));
  return res;
}

/// Next-token objective with the router losses folded in.
template <typename T>
LossComponents<T> model_loss(const ModelConfig& cfg, const ForwardResult<T>& fr,
                             const std::vector<std::size_t>& targets) {
  Var<T> task = cross_entropy_from_logits(fr.logits, targets);
  return combine_losses(task, fr.aux, fr.z, cfg.moe.aux_coeff, cfg.moe.z_coeff,
                        fr.dropped_fraction);
}

}  // namespace grainmoe
