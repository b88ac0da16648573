// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

// Desk-scale training loop over the synthetic corpus.

#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "grainmoe/analysis.hpp"
#include "grainmoe/data.hpp"
#include "grainmoe/model.hpp"
#include "grainmoe/optim.hpp"
#include "grainmoe/schedule.hpp"

namespace grainmoe {

struct TrainHyperparams {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double peak_lr = 2e-4;
  double warmup_frac = 0.01;
  double end_ratio = 0.1;  // cosine floor as a fraction of peak_lr
  double clip_threshold = 1.0;
  std::size_t batch_seqs = 8;  // sequences of data.seq_len tokens per step
  std::size_t steps = 2000;
  double aux_coeff = 1e-2;
  double z_coeff = 1e-3;
  std::uint64_t seed = 0;
  std::size_t eval_interval = 50;
  std::size_t eval_sequences = 32;  // validation sequences per evaluation
  std::size_t ep_size = 8;

  void validate() const {
    if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) throw ConfigError("warmup_frac must lie in (0, 1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (eps < 0.0 || weight_decay < 0.0 || aux_coeff < 0.0 || z_coeff < 0.0) {
      throw ConfigError("coefficients must be >= 0");
    }
    if (!(peak_lr >= 0.0)) throw ConfigError("peak_lr must be >= 0");
    if (!(end_ratio >= 0.0 && end_ratio <= 1.0)) throw ConfigError("end_ratio must lie in [0, 1]");
    if (!(clip_threshold > 0.0)) throw ConfigError("clip_threshold must be positive");
    if (batch_seqs == 0 || steps == 0) throw ConfigError("batch_seqs and steps must be positive");
    if (eval_interval == 0 || eval_sequences == 0) throw ConfigError("eval settings must be positive");
    if (ep_size == 0) throw ConfigError("ep_size must be positive");
  }

  AdamWConfig adamw() const { return {beta1, beta2, eps, weight_decay}; }
};

/// Everything needed to reproduce a run.
struct RunConfig {
  std::string preset;  // empty when built from a file
  ModelConfig model;
  TrainHyperparams hp;
  SynthDataConfig data;

  void validate() const {
    model.validate();
    hp.validate();
    data.validate();
    if (data.vocab != model.vocab_size) throw ConfigError("data vocab must equal model vocab_size");
    if (data.seq_len != model.seq_len) throw ConfigError("data seq_len must equal model seq_len");
    if (model.moe.n_experts % hp.ep_size != 0) {
      throw ConfigError("ep_size " + std::to_string(hp.ep_size) + " must divide expert count " +
                        std::to_string(model.moe.n_experts));
    }
    if (hp.aux_coeff != model.moe.aux_coeff || hp.z_coeff != model.moe.z_coeff) {
      throw ConfigError("hp loss coefficients disagree with model.moe");
    }
  }
};

/// Scaled-down model shapes mirroring the four variants of each family:
/// G1 / G8 granularity at 1x and 2x active experts.
inline std::vector<std::string> desk_preset_names() {
  return {"desk-g1", "desk-g8", "desk-2x-g1", "desk-2x-g8"};
}

inline RunConfig desk_preset(const std::string& name) {
  std::size_t g = 0, k = 0;
  if (name == "desk-g1") { g = 1; k = 1; }
  else if (name == "desk-g8") { g = 8; k = 1; }
  else if (name == "desk-2x-g1") { g = 1; k = 2; }
  else if (name == "desk-2x-g8") { g = 8; k = 2; }
  else throw ConfigError("unknown preset '" + name + "' (known: desk-g1, desk-g8, desk-2x-g1, desk-2x-g8)");

  RunConfig rc;
  rc.preset = name;
  auto& m = rc.model;
  m.n_layers = 2;
  m.d_model = 64;
  m.n_heads = 4;
  m.vocab_size = 32;
  m.seq_len = 32;
  m.rotary_pct = 0.25;
  m.attn_dropout_p = 0.0;
  m.init_std = 0.02;
  m.moe.d_model = 64;
  m.moe.n_experts = 8 * g;
  m.moe.top_k = k * g;
  m.moe.d_expert = 128 / g;
  m.moe.capacity_factor = 1.5;
  m.moe.softmax_order = m.moe.top_k > 1 ? SoftmaxOrder::AfterTopK : SoftmaxOrder::BeforeTopK;

  rc.hp.peak_lr = 3e-3;
  rc.hp.steps = 2000;
  rc.hp.batch_seqs = 32;

  rc.data.vocab = 32;
  rc.data.seq_len = 32;
  return rc;
}

struct TrainResult {
  std::vector<MetricRecord> records;
  std::vector<LogitRankSnapshot> snapshots;
  ModelParams<float> params;
  ScheduleSpec schedule;
  bool diverged = false;
  std::string error;
};

/// Called after each emitted record; return false to stop early.
using TrainObserver = std::function<bool(const MetricRecord&)>;

namespace detail {

template <typename T>
std::vector<OptimParam<T>> optim_params(const ModelParams<T>& p) {
  std::vector<OptimParam<T>> out;
  for (auto& np : p.named()) out.push_back({np.var, np.decay});
  return out;
}

inline void fill_ep_load(MetricRecord& r, const std::vector<RoutingDecision>& decisions,
                         std::size_t ep_size) {
  r.ep_load.assign(ep_size, 0.0);
  r.ep_load_by_layer.clear();
  for (const auto& d : decisions) {
    r.ep_load_by_layer.push_back(ep_load_fractions(d, ep_size));
    for (std::size_t g = 0; g < ep_size; ++g) r.ep_load[g] += r.ep_load_by_layer.back()[g];
  }
  for (auto& f : r.ep_load) f /= static_cast<double>(decisions.size());
}

}  // namespace detail

/// Mean task loss over validation sequences, without dropout.
template <typename T>
double validation_loss(const RunConfig& rc, const ModelParams<T>& params,
                       const SyntheticCorpus& corpus) {
  NoGradGuard ng;
  const std::size_t n = std::min(rc.hp.eval_sequences, corpus.validation().size());
  const auto batch = corpus.validation_batch(0, n);
  auto fr = forward(rc.model, params, batch.inputs);
  return static_cast<double>(cross_entropy_from_logits(fr.logits, batch.targets).value().item());
}

/// Per-layer gate-rank medians on the first validation sequences.
template <typename T>
std::vector<LogitRankSnapshot> probe_logit_ranks(const RunConfig& rc, const ModelParams<T>& params,
                                                 const SyntheticCorpus& corpus, std::size_t step) {
  NoGradGuard ng;
  const std::size_t n = std::min(rc.hp.eval_sequences, corpus.validation().size());
  auto fr = forward(rc.model, params, corpus.validation_batch(0, n).inputs);
  std::vector<LogitRankSnapshot> out;
  for (std::size_t l = 0; l < fr.decisions.size(); ++l) {
    out.push_back(logit_rank_medians(sorted_gate_lists(fr.decisions[l]), l, step));
  }
  return out;
}

/// Runs `schedule` from fresh optimizer state on `params`. Step s (1..steps)
/// uses lr_at(s). Row 0 is an evaluation-only record of the starting point.
inline TrainResult train_phase(const RunConfig& rc, const SyntheticCorpus& corpus,
                               ModelParams<float> params, const ScheduleSpec& schedule,
                               std::uint64_t phase_seed, const TrainObserver& observer = {}) {
  rc.validate();
  schedule.validate();
  TrainResult res;
  res.schedule = schedule;
  auto oparams = detail::optim_params(params);
  AdamWState<float> state;
  const AdamWConfig acfg = rc.hp.adamw();

  auto emit = [&](MetricRecord r) {
    res.records.push_back(std::move(r));
    return !observer || observer(res.records.back());
  };

  try {
    for (std::size_t step = 0; step <= schedule.steps; ++step) {
      const auto batch = corpus.train_batch(mix_seed(phase_seed, step), rc.hp.batch_seqs);
      MetricRecord rec;
      rec.step = step;
      rec.lr = lr_at(step, schedule);
      const bool eval_now = step % rc.hp.eval_interval == 0 || step == schedule.steps;
      if (step == 0) {
        NoGradGuard ng;
        auto fr = forward(rc.model, params, batch.inputs);
        auto lc = model_loss(rc.model, fr, batch.targets);
        rec.loss = lc.task.value().item();
        rec.aux_loss = lc.aux.value().item();
        rec.z_loss = lc.z.value().item();
        rec.dropped_frac = lc.dropped_fraction;
        detail::fill_ep_load(rec, fr.decisions, rc.hp.ep_size);
      } else {
        for (auto& p : oparams) p.var.zero_grad();
        ForwardOptions fo;
        fo.train = true;
        fo.dropout_seed = mix_seed(phase_seed ^ 0xD50ULL, step);
        auto fr = forward(rc.model, params, batch.inputs, fo);
        auto lc = model_loss(rc.model, fr, batch.targets);
        rec.loss = lc.task.value().item();
        rec.aux_loss = lc.aux.value().item();
        rec.z_loss = lc.z.value().item();
        rec.dropped_frac = lc.dropped_fraction;
        detail::fill_ep_load(rec, fr.decisions, rc.hp.ep_size);
        if (!std::isfinite(lc.total.value().item())) throw NumericError("non-finite loss");
        backward(lc.total);
        rec.grad_norm = clip_grad_norm(oparams, rc.hp.clip_threshold);
        adamw_step(oparams, state, rec.lr, acfg);
      }
      if (eval_now) {
        rec.val_loss = validation_loss(rc, params, corpus);
        if (!std::isfinite(*rec.val_loss)) throw NumericError("non-finite validation loss");
        for (auto& s : probe_logit_ranks(rc, params, corpus, step)) res.snapshots.push_back(std::move(s));
      }
      if (!emit(std::move(rec))) break;
    }
  } catch (const NumericError& e) {
    res.diverged = true;
    res.error = e.what();
    MetricRecord diag;
    diag.step = res.records.empty() ? 0 : res.records.back().step + 1;
    diag.loss = std::nan("");
    diag.ep_load.assign(rc.hp.ep_size, 0.0);
    res.records.push_back(std::move(diag));
  }
  res.params = std::move(params);
  return res;
}

/// Main pretraining phase from a fresh initialization.
inline TrainResult train(const RunConfig& rc, const SyntheticCorpus& corpus,
                         const TrainObserver& observer = {}) {
  rc.validate();
  auto params = init_params<float>(rc.model, mix_seed(rc.hp.seed, 0x1417ULL));
  const auto schedule = main_schedule(rc.hp.peak_lr, rc.hp.steps, rc.hp.warmup_frac, rc.hp.end_ratio);
  return train_phase(rc, corpus, std::move(params), schedule, mix_seed(rc.hp.seed, 0x7A11ULL), observer);
}

/// Second phase: reset optimizer, resume from the prior final LR.
inline TrainResult continue_pretraining(const RunConfig& rc, const SyntheticCorpus& corpus,
                                        ModelParams<float> params, const ScheduleSpec& prior,
                                        double budget_frac = 0.1, const TrainObserver& observer = {}) {
  const auto schedule = continued_schedule(prior.end_lr, prior.steps, budget_frac);
  return train_phase(rc, corpus, std::move(params), schedule, mix_seed(rc.hp.seed, 0xC0417ULL), observer);
}

}  // namespace grainmoe
