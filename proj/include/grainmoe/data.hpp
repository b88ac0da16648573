// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

// Deterministic synthetic language: an order-2 Markov chain over a small
// vocabulary with occasional verbatim copies of earlier spans.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "grainmoe/model.hpp"
#include "grainmoe/ops.hpp"

namespace grainmoe {

struct SynthDataConfig {
  std::size_t vocab = 64;
  std::size_t seq_len = 32;
  std::size_t train_sequences = 4096;
  std::size_t val_sequences = 64;
  std::size_t branching = 3;  // successors per context
  double copy_prob = 0.05;    // per-position chance to start a copied span
  std::size_t copy_len = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab < 2) throw ConfigError("data vocab must be at least 2");
    if (seq_len < 2) throw ConfigError("data seq_len must be at least 2");
    if (branching == 0 || branching > vocab) throw ConfigError("branching must be in [1, vocab]");
    if (train_sequences == 0 || val_sequences == 0) throw ConfigError("empty data split");
    if (!(copy_prob >= 0.0 && copy_prob < 1.0)) throw ConfigError("copy_prob must be in [0, 1)");
  }
};

/// Next-token distribution conditioned on the previous two tokens. Each
/// context has `branching` distinct successors with Dirichlet(1) weights.
class MarkovChain2 {
 public:
  MarkovChain2(std::size_t vocab, std::size_t branching, std::uint64_t seed)
      : vocab_(vocab), branching_(branching) {
    std::mt19937_64 rng(seed);
    next_.resize(vocab * vocab * branching);
    prob_.resize(vocab * vocab * branching);
    std::vector<std::size_t> perm(vocab);
    for (std::size_t ctx = 0; ctx < vocab * vocab; ++ctx) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      // partial Fisher-Yates with portable index draws
      for (std::size_t i = 0; i < branching; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng() % (vocab - i));
        std::swap(perm[i], perm[j]);
      }
      double total = 0.0;
      for (std::size_t i = 0; i < branching; ++i) {
        const double w = -std::log(1.0 - detail::unit_uniform(rng));  // Exp(1)
        next_[ctx * branching + i] = perm[i];
        prob_[ctx * branching + i] = w;
        total += w;
      }
      for (std::size_t i = 0; i < branching; ++i) prob_[ctx * branching + i] /= total;
    }
  }

  std::size_t vocab() const { return vocab_; }

  double transition(std::size_t a, std::size_t b, std::size_t c) const {
    const std::size_t base = (a * vocab_ + b) * branching_;
    for (std::size_t i = 0; i < branching_; ++i)
      if (next_[base + i] == c) return prob_[base + i];
    return 0.0;
  }

  std::size_t sample(std::size_t a, std::size_t b, std::mt19937_64& rng) const {
    const std::size_t base = (a * vocab_ + b) * branching_;
    double u = detail::unit_uniform(rng);
    for (std::size_t i = 0; i + 1 < branching_; ++i) {
      if (u < prob_[base + i]) return next_[base + i];
      u -= prob_[base + i];
    }
    return next_[base + branching_ - 1];
  }

  /// Stationary distribution over (prev, cur) pairs by lazy power iteration
  /// started from the uniform distribution.
  std::vector<double> stationary_pairs(int iterations = 2000) const {
    const std::size_t n = vocab_ * vocab_;
    std::vector<double> pi(n, 1.0 / static_cast<double>(n)), next(n);
    for (int it = 0; it < iterations; ++it) {
      std::fill(next.begin(), next.end(), 0.0);
      for (std::size_t ctx = 0; ctx < n; ++ctx) {
        if (pi[ctx] == 0.0) continue;
        const std::size_t b = ctx % vocab_;
        for (std::size_t i = 0; i < branching_; ++i) {
          next[b * vocab_ + next_[ctx * branching_ + i]] += pi[ctx] * prob_[ctx * branching_ + i];
        }
      }
      for (std::size_t s = 0; s < n; ++s) pi[s] = 0.5 * pi[s] + 0.5 * next[s];
    }
    return pi;
  }

  std::vector<double> stationary_unigram() const {
    auto pairs = stationary_pairs();
    std::vector<double> uni(vocab_, 0.0);
    for (std::size_t s = 0; s < pairs.size(); ++s) uni[s % vocab_] += pairs[s];
    return uni;
  }

  /// Entropy (nats) of the stationary single-token marginal.
  double unigram_entropy() const {
    double h = 0.0;
    for (double p : stationary_unigram())
      if (p > 0.0) h -= p * std::log(p);
    return h;
  }

  /// Conditional entropy H(next | prev two) under the stationary pair law.
  double entropy_rate() const {
    auto pairs = stationary_pairs();
    double h = 0.0;
    for (std::size_t ctx = 0; ctx < pairs.size(); ++ctx) {
      for (std::size_t i = 0; i < branching_; ++i) {
        const double p = prob_[ctx * branching_ + i];
        if (p > 0.0) h -= pairs[ctx] * p * std::log(p);
      }
    }
    return h;
  }

 private:
  std::size_t vocab_, branching_;
  std::vector<std::size_t> next_;
  std::vector<double> prob_;
};

struct TokenBatch {
  std::vector<std::size_t> inputs;   // B * seq_len
  std::vector<std::size_t> targets;  // inputs shifted by one
};

/// Fixed train and validation pools generated once from the seed. Each
/// sequence has seq_len + 1 tokens so inputs and targets both span seq_len.
class SyntheticCorpus {
 public:
  explicit SyntheticCorpus(const SynthDataConfig& cfg)
      : cfg_(cfg), chain_((cfg.validate(), cfg.vocab), cfg.branching, mix_seed(cfg.seed, 1)) {
    const auto pairs = chain_.stationary_pairs();
    pair_cdf_.resize(pairs.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) pair_cdf_[i] = (acc += pairs[i]);
    std::mt19937_64 train_rng(mix_seed(cfg.seed, 2));
    std::mt19937_64 val_rng(mix_seed(cfg.seed, 3));
    for (std::size_t i = 0; i < cfg.train_sequences; ++i) train_.push_back(generate(train_rng));
    for (std::size_t i = 0; i < cfg.val_sequences; ++i) val_.push_back(generate(val_rng));
  }

  const SynthDataConfig& config() const { return cfg_; }
  const MarkovChain2& chain() const { return chain_; }
  const std::vector<std::vector<std::size_t>>& train() const { return train_; }
  const std::vector<std::vector<std::size_t>>& validation() const { return val_; }

  /// Sequence indices drawn for a training step; a pure function of (seed, step).
  std::vector<std::size_t> batch_indices(std::size_t step, std::size_t batch_seqs) const {
    std::mt19937_64 rng(mix_seed(cfg_.seed ^ 0xBA7C4ULL, step));
    std::vector<std::size_t> idx(batch_seqs);
    for (auto& i : idx) i = static_cast<std::size_t>(rng() % train_.size());
    return idx;
  }

  TokenBatch train_batch(std::size_t step, std::size_t batch_seqs) const {
    return assemble(train_, batch_indices(step, batch_seqs));
  }

  /// Validation sequences [first, first + count).
  TokenBatch validation_batch(std::size_t first, std::size_t count) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = first; i < std::min(first + count, val_.size()); ++i) idx.push_back(i);
    return assemble(val_, idx);
  }

 private:
  std::vector<std::size_t> generate(std::mt19937_64& rng) const {
    const std::size_t len = cfg_.seq_len + 1;
    std::vector<std::size_t> seq;
    seq.reserve(len);
    const double u = detail::unit_uniform(rng) * pair_cdf_.back();
    const std::size_t pair = static_cast<std::size_t>(
        std::upper_bound(pair_cdf_.begin(), pair_cdf_.end(), u) - pair_cdf_.begin());
    const std::size_t start = std::min(pair, pair_cdf_.size() - 1);
    seq.push_back(start / cfg_.vocab);
    seq.push_back(start % cfg_.vocab);
    while (seq.size() < len) {
      const std::size_t i = seq.size();
      if (cfg_.copy_len > 0 && i > cfg_.copy_len + 1 && detail::unit_uniform(rng) < cfg_.copy_prob) {
        const std::size_t from = static_cast<std::size_t>(rng() % (i - cfg_.copy_len));
        for (std::size_t c = 0; c < cfg_.copy_len && seq.size() < len; ++c) seq.push_back(seq[from + c]);
        continue;
      }
      seq.push_back(chain_.sample(seq[i - 2], seq[i - 1], rng));
    }
    return seq;
  }

  TokenBatch assemble(const std::vector<std::vector<std::size_t>>& pool,
                      const std::vector<std::size_t>& idx) const {
    TokenBatch b;
    for (auto i : idx) {
      const auto& s = pool[i];
      b.inputs.insert(b.inputs.end(), s.begin(), s.end() - 1);
      b.targets.insert(b.targets.end(), s.begin() + 1, s.end());
    }
    return b;
  }

  SynthDataConfig cfg_;
  MarkovChain2 chain_;
  std::vector<double> pair_cdf_;
  std::vector<std::vector<std::size_t>> train_, val_;
};

}  // namespace grainmoe
