// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

// Architecture planning: the granularity transform and exact parameter and
// FLOPs accounting for MoE transformers. All counts are integers.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "grainmoe/tensor.hpp"

namespace grainmoe {

/// Architecture shape. n_experts/top_k are the coarse (G = 1) values; the
/// instantiated layer has granularity * n_experts experts of width d_expert
/// and routes each token to granularity * top_k of them.
struct ArchSpec {
  std::string name;
  std::uint64_t n_layers = 0;
  std::uint64_t d_model = 0;
  std::uint64_t d_ff = 0;
  std::uint64_t vocab_size = 0;
  std::uint64_t n_experts = 0;
  std::uint64_t top_k = 0;
  std::uint64_t granularity = 1;
  std::uint64_t d_expert = 0;
  bool tied_embeddings = false;
  std::vector<std::string> assumptions;

  std::uint64_t effective_experts() const { return granularity * n_experts; }
  std::uint64_t effective_top_k() const { return granularity * top_k; }

  void validate() const {
    if (n_layers == 0 || d_model == 0 || d_ff == 0 || vocab_size == 0) {
      throw ConfigError("arch '" + name + "': layer, width and vocab sizes must be positive");
    }
    if (n_experts == 0 || top_k == 0 || top_k > n_experts) {
      throw ConfigError("arch '" + name + "': need 1 <= top_k <= n_experts");
    }
    if (granularity == 0 || d_ff % granularity != 0) {
      throw ConfigError("arch '" + name + "': granularity must divide d_ff");
    }
    if (d_expert != d_ff / granularity) {
      throw ConfigError("arch '" + name + "': d_expert must equal d_ff / granularity");
    }
  }
};

/// Splits every expert into G narrower ones and routes to G times as many.
inline ArchSpec granularity_transform(const ArchSpec& base, std::uint64_t g) {
  base.validate();
  if (g == 0) throw ConfigError("granularity factor must be >= 1");
  const std::uint64_t combined = base.granularity * g;
  if (base.d_ff % combined != 0) {
    throw ConfigError("granularity " + std::to_string(combined) + " does not divide d_ff " +
                      std::to_string(base.d_ff));
  }
  ArchSpec out = base;
  out.granularity = combined;
  out.d_expert = base.d_ff / combined;
  if (g != 1) out.name = base.name + "-x" + std::to_string(g);
  return out;
}

struct CountReport {
  std::uint64_t embedding_params = 0;  // input embedding + separate unembedding
  std::uint64_t attention_params = 0;  // all layers
  std::uint64_t norm_params = 0;
  std::uint64_t router_params = 0;
  std::uint64_t expert_params_total = 0;
  std::uint64_t expert_params_active = 0;
  std::uint64_t active_params = 0;
  std::uint64_t total_params = 0;
  // Forward FLOPs per token: 2 x matmul weights on the active path,
  // unembedding included, embedding lookup excluded.
  std::uint64_t flops_per_token = 0;
  std::uint64_t flops_per_token_excl_router = 0;
  // Only the MoE layers (experts + router).
  std::uint64_t moe_flops_per_token = 0;

  std::uint64_t non_router_total() const { return total_params - router_params; }
  std::uint64_t non_router_active() const { return active_params - router_params; }
};

inline CountReport count_params(const ArchSpec& spec) {
  spec.validate();
  const std::uint64_t d = spec.d_model, L = spec.n_layers, V = spec.vocab_size;
  const std::uint64_t experts = spec.effective_experts(), k = spec.effective_top_k();
  const std::uint64_t per_expert = 3 * d * spec.d_expert;
  CountReport r;
  const std::uint64_t unembed = spec.tied_embeddings ? 0 : V * d;
  r.embedding_params = V * d + unembed;
  r.attention_params = L * 4 * d * d;
  r.norm_params = L * 2 * (2 * d) + 2 * d;  // two norms per layer plus the final one
  r.router_params = L * d * experts;
  r.expert_params_total = L * experts * per_expert;
  r.expert_params_active = L * k * per_expert;
  const std::uint64_t shared = r.embedding_params + r.attention_params + r.norm_params;
  r.total_params = shared + r.router_params + r.expert_params_total;
  r.active_params = shared + r.router_params + r.expert_params_active;
  const std::uint64_t matmul_active = r.attention_params + r.expert_params_active + V * d;
  r.flops_per_token_excl_router = 2 * matmul_active;
  r.flops_per_token = 2 * (matmul_active + r.router_params);
  r.moe_flops_per_token = 2 * (r.expert_params_active + r.router_params);
  return r;
}

/// Sequence-length dependent attention score and value FLOPs per token
/// (QK^T and AV), kept out of the parameter-based counts.
inline std::uint64_t attention_score_flops_per_token(const ArchSpec& spec, std::uint64_t seq_len) {
  return 2 * 2 * spec.n_layers * seq_len * spec.d_model;
}

struct ParityReport {
  bool passed = true;
  std::uint64_t non_router_total_a = 0, non_router_total_b = 0;
  std::uint64_t non_router_active_a = 0, non_router_active_b = 0;
  std::uint64_t flops_excl_router_a = 0, flops_excl_router_b = 0;
  double router_ratio = 1.0;  // router params of b over a
  std::vector<std::string> diffs;
};

/// Confirms that a granularity transform leaves everything except the
/// router unchanged in both parameters and active FLOPs.
inline ParityReport parity_check(const ArchSpec& a, const ArchSpec& b) {
  const auto ca = count_params(a), cb = count_params(b);
  ParityReport rep;
  rep.non_router_total_a = ca.non_router_total();
  rep.non_router_total_b = cb.non_router_total();
  rep.non_router_active_a = ca.non_router_active();
  rep.non_router_active_b = cb.non_router_active();
  rep.flops_excl_router_a = ca.flops_per_token_excl_router;
  rep.flops_excl_router_b = cb.flops_per_token_excl_router;
  rep.router_ratio = static_cast<double>(cb.router_params) / static_cast<double>(ca.router_params);

  auto compare = [&](const char* what, std::uint64_t x, std::uint64_t y) {
    if (x != y) {
      rep.passed = false;
      std::ostringstream os;
      os << what << ": " << x << " vs " << y << " (diff "
         << static_cast<long long>(y) - static_cast<long long>(x) << ")";
      rep.diffs.push_back(os.str());
    }
  };
  compare("embedding params", ca.embedding_params, cb.embedding_params);
  compare("attention params", ca.attention_params, cb.attention_params);
  compare("norm params", ca.norm_params, cb.norm_params);
  compare("expert params (total)", ca.expert_params_total, cb.expert_params_total);
  compare("expert params (active)", ca.expert_params_active, cb.expert_params_active);
  compare("non-router total params", rep.non_router_total_a, rep.non_router_total_b);
  compare("non-router active FLOPs", rep.flops_excl_router_a, rep.flops_excl_router_b);
  return rep;
}

// ---------------------------------------------------------------------------
// Presets

namespace detail {

inline ArchSpec family_base(const std::string& family) {
  ArchSpec s;
  s.vocab_size = 256000;
  s.n_experts = 8;
  s.granularity = 1;
  if (family == "11b") {
    s.n_layers = 24;
    s.d_model = 2048;
    s.d_ff = 8192;
    s.assumptions = {"n_layers=24 inferred (final router layer is layer 24)",
                     "untied input/output embeddings inferred from totals"};
  } else {
    s.n_layers = 32;
    s.d_model = 4096;
    s.d_ff = 16384;
    s.assumptions = {"n_layers=32 inferred by solving the reported totals",
                     "untied input/output embeddings inferred from totals"};
  }
  s.d_expert = s.d_ff;
  return s;
}

}  // namespace detail

inline std::vector<std::string> arch_preset_names() {
  return {"11b-g1", "11b-g8", "11b-2x-g1", "11b-2x-g8",
          "56b-g1", "56b-g8", "56b-2x-g1", "56b-2x-g8"};
}

/// Published 11B/56B configurations: {1x,2x}FLOPs x {G1,G8}.
inline ArchSpec arch_preset(const std::string& name) {
  const auto names = arch_preset_names();
  if (std::find(names.begin(), names.end(), name) == names.end()) {
    std::string known;
    for (const auto& n : names) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
  }
  const std::string family = name.substr(0, 3);
  const bool two_x = name.find("-2x-") != std::string::npos;
  const std::uint64_t g = name.ends_with("g8") ? 8 : 1;
  ArchSpec base = detail::family_base(family);
  base.top_k = two_x ? 2 : 1;
  ArchSpec out = granularity_transform(base, g);
  out.name = name;
  return out;
}

/// "2.7B" style rounding to 0.1 billion.
inline std::string format_billions(std::uint64_t n) {
  const double b = std::round(static_cast<double>(n) / 1e8) / 10.0;
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(1);
  os << b << "B";
  return os.str();
}

/// Row layout: experts, top-k, active, d_model, d_expert, total.
inline std::string plan_table_row(const ArchSpec& s, const CountReport& c) {
  std::ostringstream os;
  os << s.effective_experts() << ", " << s.effective_top_k() << ", "
     << format_billions(c.active_params) << ", " << s.d_model << ", " << s.d_expert << ", "
     << format_billions(c.total_params);
  return os.str();
}

// ---------------------------------------------------------------------------
// JSON

inline void to_json(nlohmann::json& j, const ArchSpec& s) {
  j = nlohmann::json{{"name", s.name},
                     {"n_layers", s.n_layers},
                     {"d_model", s.d_model},
                     {"d_ff", s.d_ff},
                     {"vocab_size", s.vocab_size},
                     {"n_experts", s.n_experts},
                     {"top_k", s.top_k},
                     {"granularity", s.granularity},
                     {"d_expert", s.d_expert},
                     {"tied_embeddings", s.tied_embeddings},
                     {"assumptions", s.assumptions}};
}

inline void from_json(const nlohmann::json& j, ArchSpec& s) {
  s.name = j.value("name", std::string("custom"));
  j.at("n_layers").get_to(s.n_layers);
  j.at("d_model").get_to(s.d_model);
  j.at("d_ff").get_to(s.d_ff);
  j.at("vocab_size").get_to(s.vocab_size);
  j.at("n_experts").get_to(s.n_experts);
  j.at("top_k").get_to(s.top_k);
  s.granularity = j.value("granularity", std::uint64_t{1});
  s.d_expert = j.value("d_expert", s.granularity ? s.d_ff / s.granularity : 0);
  s.tied_embeddings = j.value("tied_embeddings", false);
  s.assumptions = j.value("assumptions", std::vector<std::string>{});
  s.validate();
}

inline nlohmann::json count_report_json(const ArchSpec& s, const CountReport& c) {
  return nlohmann::json{
      {"arch", s},
      {"effective_experts", s.effective_experts()},
      {"effective_top_k", s.effective_top_k()},
      {"active_params", c.active_params},
      {"total_params", c.total_params},
      {"router_params", c.router_params},
      {"embedding_params", c.embedding_params},
      {"attention_params", c.attention_params},
      {"norm_params", c.norm_params},
      {"expert_params_total", c.expert_params_total},
      {"expert_params_active", c.expert_params_active},
      {"flops_per_token", c.flops_per_token},
      {"flops_per_token_excl_router", c.flops_per_token_excl_router},
      {"moe_flops_per_token", c.moe_flops_per_token},
      {"attention_score_flops_per_token_seq2048", attention_score_flops_per_token(s, 2048)},
      {"active_params_rounded", format_billions(c.active_params)},
      {"total_params_rounded", format_billions(c.total_params)}};
}

}  // namespace grainmoe
