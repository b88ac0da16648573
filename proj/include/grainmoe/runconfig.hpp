// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

// JSON form of RunConfig. Unknown keys are rejected; missing keys keep their
// defaults. Writing then reading a config gives back the same values.

#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <string>

#include <json.hpp>

#include "grainmoe/train.hpp"

namespace grainmoe {

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <typename V>
void read_opt(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const MoEConfig& c) {
  j = nlohmann::json{{"n_experts", c.n_experts},
                     {"top_k", c.top_k},
                     {"d_model", c.d_model},
                     {"d_expert", c.d_expert},
                     {"softmax_order", to_string(c.softmax_order)},
                     {"aux_coeff", c.aux_coeff},
                     {"z_coeff", c.z_coeff}};
  // JSON has no infinity; "inf" means no dropping.
  if (std::isinf(c.capacity_factor)) j["capacity_factor"] = "inf";
  else j["capacity_factor"] = c.capacity_factor;
}

inline void from_json(const nlohmann::json& j, MoEConfig& c) {
  const std::string w = "model.moe";
  detail::check_keys(j, {"n_experts", "top_k", "d_model", "d_expert", "capacity_factor",
                         "softmax_order", "aux_coeff", "z_coeff"}, w);
  detail::read_opt(j, "n_experts", c.n_experts, w);
  detail::read_opt(j, "top_k", c.top_k, w);
  detail::read_opt(j, "d_model", c.d_model, w);
  detail::read_opt(j, "d_expert", c.d_expert, w);
  detail::read_opt(j, "aux_coeff", c.aux_coeff, w);
  detail::read_opt(j, "z_coeff", c.z_coeff, w);
  if (j.contains("capacity_factor")) {
    const auto& cf = j.at("capacity_factor");
    if (cf.is_string()) {
      if (cf.get<std::string>() != "inf") throw ConfigError(w + ".capacity_factor: expected a number or \"inf\"");
      c.capacity_factor = std::numeric_limits<double>::infinity();
    } else {
      detail::read_opt(j, "capacity_factor", c.capacity_factor, w);
    }
  }
  if (j.contains("softmax_order")) {
    std::string s;
    detail::read_opt(j, "softmax_order", s, w);
    c.softmax_order = softmax_order_from_string(s);
  }
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},         {"d_model", c.d_model},
                     {"n_heads", c.n_heads},           {"vocab_size", c.vocab_size},
                     {"seq_len", c.seq_len},           {"rotary_pct", c.rotary_pct},
                     {"attn_dropout_p", c.attn_dropout_p}, {"init_std", c.init_std},
                     {"tied_embeddings", c.tied_embeddings}, {"moe", c.moe}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  const std::string w = "model";
  detail::check_keys(j, {"n_layers", "d_model", "n_heads", "vocab_size", "seq_len", "rotary_pct",
                         "attn_dropout_p", "init_std", "tied_embeddings", "moe"}, w);
  detail::read_opt(j, "n_layers", c.n_layers, w);
  detail::read_opt(j, "d_model", c.d_model, w);
  detail::read_opt(j, "n_heads", c.n_heads, w);
  detail::read_opt(j, "vocab_size", c.vocab_size, w);
  detail::read_opt(j, "seq_len", c.seq_len, w);
  detail::read_opt(j, "rotary_pct", c.rotary_pct, w);
  detail::read_opt(j, "attn_dropout_p", c.attn_dropout_p, w);
  detail::read_opt(j, "init_std", c.init_std, w);
  detail::read_opt(j, "tied_embeddings", c.tied_embeddings, w);
  if (j.contains("moe")) from_json(j.at("moe"), c.moe);
}

inline void to_json(nlohmann::json& j, const TrainHyperparams& h) {
  j = nlohmann::json{{"beta1", h.beta1},
                     {"beta2", h.beta2},
                     {"eps", h.eps},
                     {"weight_decay", h.weight_decay},
                     {"peak_lr", h.peak_lr},
                     {"warmup_frac", h.warmup_frac},
                     {"end_ratio", h.end_ratio},
                     {"clip_threshold", h.clip_threshold},
                     {"batch_seqs", h.batch_seqs},
                     {"steps", h.steps},
                     {"aux_coeff", h.aux_coeff},
                     {"z_coeff", h.z_coeff},
                     {"seed", h.seed},
                     {"eval_interval", h.eval_interval},
                     {"eval_sequences", h.eval_sequences},
                     {"ep_size", h.ep_size}};
}

inline void from_json(const nlohmann::json& j, TrainHyperparams& h) {
  const std::string w = "hp";
  detail::check_keys(j, {"beta1", "beta2", "eps", "weight_decay", "peak_lr", "warmup_frac",
                         "end_ratio", "clip_threshold", "batch_seqs", "steps", "aux_coeff",
                         "z_coeff", "seed", "eval_interval", "eval_sequences", "ep_size"}, w);
  detail::read_opt(j, "beta1", h.beta1, w);
  detail::read_opt(j, "beta2", h.beta2, w);
  detail::read_opt(j, "eps", h.eps, w);
  detail::read_opt(j, "weight_decay", h.weight_decay, w);
  detail::read_opt(j, "peak_lr", h.peak_lr, w);
  detail::read_opt(j, "warmup_frac", h.warmup_frac, w);
  detail::read_opt(j, "end_ratio", h.end_ratio, w);
  detail::read_opt(j, "clip_threshold", h.clip_threshold, w);
  detail::read_opt(j, "batch_seqs", h.batch_seqs, w);
  detail::read_opt(j, "steps", h.steps, w);
  detail::read_opt(j, "aux_coeff", h.aux_coeff, w);
  detail::read_opt(j, "z_coeff", h.z_coeff, w);
  detail::read_opt(j, "seed", h.seed, w);
  detail::read_opt(j, "eval_interval", h.eval_interval, w);
  detail::read_opt(j, "eval_sequences", h.eval_sequences, w);
  detail::read_opt(j, "ep_size", h.ep_size, w);
}

inline void to_json(nlohmann::json& j, const SynthDataConfig& d) {
  j = nlohmann::json{{"vocab", d.vocab},
                     {"seq_len", d.seq_len},
                     {"train_sequences", d.train_sequences},
                     {"val_sequences", d.val_sequences},
                     {"branching", d.branching},
                     {"copy_prob", d.copy_prob},
                     {"copy_len", d.copy_len},
                     {"seed", d.seed}};
}

inline void from_json(const nlohmann::json& j, SynthDataConfig& d) {
  const std::string w = "data";
  detail::check_keys(j, {"vocab", "seq_len", "train_sequences", "val_sequences", "branching",
                         "copy_prob", "copy_len", "seed"}, w);
  detail::read_opt(j, "vocab", d.vocab, w);
  detail::read_opt(j, "seq_len", d.seq_len, w);
  detail::read_opt(j, "train_sequences", d.train_sequences, w);
  detail::read_opt(j, "val_sequences", d.val_sequences, w);
  detail::read_opt(j, "branching", d.branching, w);
  detail::read_opt(j, "copy_prob", d.copy_prob, w);
  detail::read_opt(j, "copy_len", d.copy_len, w);
  detail::read_opt(j, "seed", d.seed, w);
}

inline void to_json(nlohmann::json& j, const RunConfig& rc) {
  j = nlohmann::json{{"preset", rc.preset}, {"model", rc.model}, {"hp", rc.hp}, {"data", rc.data}};
}

inline void from_json(const nlohmann::json& j, RunConfig& rc) {
  detail::check_keys(j, {"preset", "model", "hp", "data"}, "config");
  detail::read_opt(j, "preset", rc.preset, "config");
  if (j.contains("model")) from_json(j.at("model"), rc.model);
  if (j.contains("hp")) from_json(j.at("hp"), rc.hp);
  if (j.contains("data")) from_json(j.at("data"), rc.data);
}

inline RunConfig read_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  RunConfig rc = j.get<RunConfig>();
  rc.validate();
  return rc;
}

inline void write_run_config(const std::string& path, const RunConfig& rc) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << nlohmann::json(rc).dump(2) << '\n';
}

}  // namespace grainmoe
