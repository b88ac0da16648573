// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

// Token-choice Mixture-of-Experts layer: linear router, top-k gating under
// either softmax ordering, capacity-limited dispatch and the two router
// auxiliary losses.

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "grainmoe/autodiff.hpp"
#include "grainmoe/ops.hpp"

namespace grainmoe {

enum class SoftmaxOrder {
  BeforeTopK,  // softmax over all experts, then keep the top-k probabilities
  AfterTopK,   // keep the top-k logits, then softmax over just those
};

inline const char* to_string(SoftmaxOrder o) {
  return o == SoftmaxOrder::BeforeTopK ? "before_topk" : "after_topk";
}

inline SoftmaxOrder softmax_order_from_string(const std::string& s) {
  if (s == "before_topk") return SoftmaxOrder::BeforeTopK;
  if (s == "after_topk") return SoftmaxOrder::AfterTopK;
  throw ConfigError("unknown softmax_order '" + s + "' (expected before_topk|after_topk)");
}

struct MoEConfig {
  std::size_t n_experts = 8;
  std::size_t top_k = 1;
  std::size_t d_model = 0;
  std::size_t d_expert = 0;
  double capacity_factor = 1.5;  // +inf disables dropping
  SoftmaxOrder softmax_order = SoftmaxOrder::BeforeTopK;
  double aux_coeff = 1e-2;
  double z_coeff = 1e-3;

  void validate() const {
    if (n_experts == 0) throw ConfigError("n_experts must be at least 1");
    if (top_k == 0 || top_k > n_experts) throw ConfigError("k exceeds expert count");
    if (d_model == 0 || d_expert == 0) throw ConfigError("d_model and d_expert must be positive");
    if (!(capacity_factor > 0.0)) throw ConfigError("capacity_factor must be > 0");
    if (softmax_order == SoftmaxOrder::AfterTopK && top_k < 2) {
      // A single renormalized gate is identically 1 and gives the router no gradient.
      throw ConfigError("softmax after top-k requires top_k >= 2");
    }
    if (aux_coeff < 0.0 || z_coeff < 0.0) throw ConfigError("loss coefficients must be >= 0");
  }
};

/// Per-expert token capacity ceil(CF * k * T / N), capped at T.
inline std::size_t expert_capacity(double capacity_factor, std::size_t top_k,
                                   std::size_t tokens, std::size_t n_experts) {
  if (!std::isfinite(capacity_factor)) return tokens;
  const double raw = capacity_factor * static_cast<double>(top_k) *
                     static_cast<double>(tokens) / static_cast<double>(n_experts);
  // Absorb representation error so that e.g. 1.5*8/4 stays exactly 3.
  const double c = std::ceil(raw - 1e-9 * std::max(1.0, raw));
  return std::min(tokens, static_cast<std::size_t>(std::max(0.0, c)));
}

/// Routing result for T tokens. Slot (t, r) lives at index t * top_k + r,
/// with r the rank of the expert for that token (descending score).
struct RoutingDecision {
  std::size_t tokens = 0;
  std::size_t top_k = 0;
  std::size_t n_experts = 0;
  std::size_t capacity = 0;
  std::vector<std::size_t> expert_ids;
  std::vector<double> gates;
  std::vector<bool> dropped;
  std::vector<std::size_t> assigned;   // per expert, before dropping
  std::vector<std::size_t> processed;  // per expert, min(assigned, capacity)

  std::size_t slot(std::size_t t, std::size_t r) const { return t * top_k + r; }

  std::size_t dropped_count() const {
    std::size_t n = 0;
    for (bool d : dropped) n += d ? 1 : 0;
    return n;
  }

  double dropped_fraction() const {
    if (dropped.empty()) return 0.0;
    return static_cast<double>(dropped_count()) / static_cast<double>(dropped.size());
  }

  /// Gate sum of token t.
  double gate_sum(std::size_t t) const {
    double s = 0.0;
    for (std::size_t r = 0; r < top_k; ++r) s += gates[slot(t, r)];
    return s;
  }
};

template <typename T>
struct RouteResult {
  RoutingDecision decision;
  Var<T> logits;  // [T x N]
  Var<T> probs;   // [T x N], full softmax (used by the balancing loss)
  Var<T> gates;   // [T * k], differentiable gate values in slot order
};

/// Linear router followed by top-k gating. Drop flags are all false; see
/// dispatch().
template <typename T>
RouteResult<T> route(const Var<T>& tokens, const Var<T>& router_weight, const MoEConfig& cfg) {
  cfg.validate();
  detail::require_matrix(tokens.shape(), "route");
  if (!(router_weight.shape() == Shape{cfg.d_model, cfg.n_experts})) {
    throw ShapeError("route: router weight shape " + shape_str(router_weight.shape()));
  }
  if (!(tokens.shape()[1] == cfg.d_model)) throw ShapeError("route: token width mismatch");
  const std::size_t n_tok = tokens.shape()[0];
  const std::size_t n = cfg.n_experts, k = cfg.top_k;

  RouteResult<T> res;
  res.logits = matmul(tokens, router_weight);
  res.probs = softmax(res.logits, 1);

  auto& d = res.decision;
  d.tokens = n_tok;
  d.top_k = k;
  d.n_experts = n;
  d.expert_ids.resize(n_tok * k);
  d.dropped.assign(n_tok * k, false);
  d.assigned.assign(n, 0);

  const bool after = cfg.softmax_order == SoftmaxOrder::AfterTopK;
  const auto& scores = after ? res.logits.value() : res.probs.value();
  std::vector<std::size_t> flat(n_tok * k);
  for (std::size_t t = 0; t < n_tok; ++t) {
    auto top = topk_select<T>(scores.data().subspan(t * n, n), k);
    for (std::size_t r = 0; r < k; ++r) {
      d.expert_ids[t * k + r] = top.indices[r];
      flat[t * k + r] = t * n + top.indices[r];
      ++d.assigned[top.indices[r]];
    }
  }

  if (after) {
    Var<T> selected = reshape(gather_elements(res.logits, flat), Shape{n_tok, k});
    res.gates = reshape(softmax(selected, 1), Shape{n_tok * k});
  } else {
    res.gates = gather_elements(res.probs, flat);
  }
  d.gates.assign(res.gates.value().data().begin(), res.gates.value().data().end());
  d.processed = d.assigned;
  d.capacity = n_tok;
  return res;
}

/// Applies per-expert capacity. Assignments are admitted in token order, so
/// earlier positions win; the rest are flagged as dropped.
inline RoutingDecision dispatch(RoutingDecision decision, std::size_t capacity) {
  auto& d = decision;
  d.capacity = capacity;
  d.dropped.assign(d.tokens * d.top_k, false);
  d.processed.assign(d.n_experts, 0);
  for (std::size_t t = 0; t < d.tokens; ++t) {
    for (std::size_t r = 0; r < d.top_k; ++r) {
      const std::size_t s = d.slot(t, r);
      const std::size_t e = d.expert_ids[s];
      if (d.processed[e] < capacity) {
        ++d.processed[e];
      } else {
        d.dropped[s] = true;
      }
    }
  }
  return decision;
}

inline RoutingDecision dispatch(RoutingDecision decision, const MoEConfig& cfg) {
  const std::size_t c =
      expert_capacity(cfg.capacity_factor, cfg.top_k, decision.tokens, cfg.n_experts);
  return dispatch(std::move(decision), c);
}

/// Load-balancing loss N * sum_i f_i * P_i. f_i is the pre-drop share of
/// assignments and is treated as a constant; gradients flow through P_i.
template <typename T>
Var<T> aux_loss(const Var<T>& router_probs, const RoutingDecision& decision) {
  if (!(router_probs.shape() == Shape{decision.tokens, decision.n_experts})) {
    throw ShapeError("aux_loss: probability shape " + shape_str(router_probs.shape()));
  }
  const double denom = static_cast<double>(decision.top_k * decision.tokens);
  Tensor<T> f(Shape{decision.n_experts});
  for (std::size_t i = 0; i < decision.n_experts; ++i) {
    f[i] = static_cast<T>(static_cast<double>(decision.assigned[i]) / denom);
  }
  Var<T> mean_prob = mean_rows(router_probs);
  return scale(sum(mul(mean_prob, Var<T>::constant(std::move(f)))),
               static_cast<T>(decision.n_experts));
}

/// Mean squared log-partition of the router logits.
template <typename T>
Var<T> z_loss(const Var<T>& router_logits) {
  detail::require_matrix(router_logits.shape(), "z_loss");
  Var<T> lse = log_sum_exp(router_logits, 1);
  return mean(mul(lse, lse));
}

template <typename T>
struct ExpertWeights {
  Var<T> w_gate;  // [d_model x d_expert]
  Var<T> w_up;    // [d_model x d_expert]
  Var<T> w_down;  // [d_expert x d_model]
};

/// Router and expert weights of one MoE layer. Construction validates the
/// configuration, so an unsupported routing setup cannot be instantiated.
template <typename T>
class MoELayer {
 public:
  MoELayer(MoEConfig cfg, Var<T> router, std::vector<ExpertWeights<T>> experts)
      : cfg_(cfg), router_(std::move(router)), experts_(std::move(experts)) {
    cfg_.validate();
    if (!(router_.shape() == Shape{cfg_.d_model, cfg_.n_experts})) {
      throw ShapeError("MoELayer: router shape " + shape_str(router_.shape()));
    }
    if (!(experts_.size() == cfg_.n_experts)) throw ShapeError("MoELayer: expert count mismatch");
    const Shape in{cfg_.d_model, cfg_.d_expert}, out{cfg_.d_expert, cfg_.d_model};
    for (const auto& e : experts_) {
      if (!(e.w_gate.shape() == in && e.w_up.shape() == in && e.w_down.shape() == out)) {
        throw ShapeError("MoELayer: expert weight shape mismatch");
      }
    }
  }

  const MoEConfig& config() const { return cfg_; }
  const Var<T>& router() const { return router_; }
  const std::vector<ExpertWeights<T>>& experts() const { return experts_; }

 private:
  MoEConfig cfg_;
  Var<T> router_;
  std::vector<ExpertWeights<T>> experts_;
};

template <typename T>
struct MoEOutput {
  Var<T> output;  // [T x d_model]
  Var<T> aux;     // unscaled balancing loss
  Var<T> z;       // unscaled z-loss
  RoutingDecision decision;
  RouteResult<T> routing;
};

/// y_t = sum over kept selections (t, i) of gate(t, i) * expert_i(x_t).
/// Dropped selections contribute nothing. Experts are combined in ascending
/// id order. `capacity_override` replaces the capacity-factor formula.
template <typename T>
MoEOutput<T> moe_forward(const Var<T>& tokens, const MoELayer<T>& layer,
                         std::optional<std::size_t> capacity_override = std::nullopt) {
  const auto& cfg = layer.config();
  MoEOutput<T> out;
  out.routing = route(tokens, layer.router(), cfg);
  out.decision = capacity_override ? dispatch(out.routing.decision, *capacity_override)
                                   : dispatch(out.routing.decision, cfg);
  const auto& d = out.decision;
  const std::size_t n_tok = d.tokens, k = d.top_k;

  std::vector<std::vector<std::size_t>> rows(cfg.n_experts), slots(cfg.n_experts);
  for (std::size_t t = 0; t < n_tok; ++t) {
    for (std::size_t r = 0; r < k; ++r) {
      const std::size_t s = d.slot(t, r);
      if (d.dropped[s]) continue;
      rows[d.expert_ids[s]].push_back(t);
      slots[d.expert_ids[s]].push_back(s);
    }
  }

  std::vector<Var<T>> contributions;
  std::vector<std::vector<std::size_t>> targets;
  for (std::size_t e = 0; e < cfg.n_experts; ++e) {
    if (rows[e].empty()) continue;
    const auto& w = layer.experts()[e];
    Var<T> x_e = gather_rows(tokens, rows[e]);
    Var<T> y_e = swiglu(x_e, w.w_gate, w.w_up, w.w_down);
    Var<T> g_e = gather_elements(out.routing.gates, slots[e]);
    contributions.push_back(scale_rows(y_e, g_e));
    targets.push_back(std::move(rows[e]));
  }
  if (contributions.empty()) {
    out.output = Var<T>::constant(Tensor<T>(Shape{n_tok, cfg.d_model}));
  } else {
    out.output = index_add_rows(n_tok, cfg.d_model, contributions, std::move(targets));
  }
  out.aux = aux_loss(out.routing.probs, d);
  out.z = z_loss(out.routing.logits);
  return out;
}

/// Training objective split into its parts. Aux and z are unscaled.
template <typename T>
struct LossComponents {
  Var<T> task;
  Var<T> aux;
  Var<T> z;
  Var<T> total;
  double aux_coeff = 0.0;
  double z_coeff = 0.0;
  double dropped_fraction = 0.0;
};

template <typename T>
LossComponents<T> combine_losses(Var<T> task, Var<T> aux, Var<T> z, double aux_coeff,
                                 double z_coeff, double dropped_fraction) {
  LossComponents<T> lc;
  lc.total = add(add(task, scale(aux, static_cast<T>(aux_coeff))),
                 scale(z, static_cast<T>(z_coeff)));
  lc.task = std::move(task);
  lc.aux = std::move(aux);
  lc.z = std::move(z);
  lc.aux_coeff = aux_coeff;
  lc.z_coeff = z_coeff;
  lc.dropped_fraction = dropped_fraction;
  return lc;
}

}  // namespace grainmoe
