// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "grainmoe/model.hpp"
#include "grainmoe/model_gradcheck.hpp"

using namespace grainmoe;

namespace {

ModelConfig small_config(std::size_t k = 2, double cf = 1.5) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.vocab_size = 11;
  cfg.seq_len = 8;
  cfg.init_std = 0.3;
  cfg.moe.n_experts = 4;
  cfg.moe.top_k = k;
  cfg.moe.d_model = 16;
  cfg.moe.d_expert = 8;
  cfg.moe.capacity_factor = cf;
  cfg.moe.softmax_order = k > 1 ? SoftmaxOrder::AfterTopK : SoftmaxOrder::BeforeTopK;
  return cfg;
}

const std::vector<std::size_t> kTokens = {3, 1, 4, 1, 5, 9, 2, 6};

}  // namespace

TEST(ModelConfig, Validation) {
  auto cfg = small_config();
  EXPECT_NO_THROW(cfg.validate());
  cfg.n_heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.rotary_pct = 0.25;  // 0.25 * 8 = 2, even
  EXPECT_NO_THROW(cfg.validate());
  cfg.rotary_pct = 0.125;  // 1 dim, odd
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.moe.d_model = 8;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Forward, LogitsShape) {
  const auto cfg = small_config();
  const auto p = init_params<double>(cfg, 1);
  const auto fr = forward(cfg, p, kTokens);
  EXPECT_EQ(fr.logits.shape(), (Shape{8, 11}));
  EXPECT_EQ(fr.decisions.size(), 2u);
}

TEST(Forward, OutOfRangeTokenRejected) {
  const auto cfg = small_config();
  const auto p = init_params<double>(cfg, 1);
  EXPECT_THROW(forward(cfg, p, {1, 11}), ConfigError);
}

TEST(Forward, PackedLengthMustDivide) {
  const auto cfg = small_config();
  const auto p = init_params<double>(cfg, 1);
  std::vector<std::size_t> ten(10, 1);
  EXPECT_THROW(forward(cfg, p, ten), ShapeError);
}

TEST(Forward, Causality) {
  for (double cf : {1.5, std::numeric_limits<double>::infinity()}) {
    const auto cfg = small_config(2, cf);
    const auto p = init_params<double>(cfg, 3);
    const auto base = forward(cfg, p, kTokens).logits.value();
    for (std::size_t t = 0; t < kTokens.size(); ++t) {
      auto toks = kTokens;
      toks[t] = (toks[t] + 1) % cfg.vocab_size;
      const auto pert = forward(cfg, p, toks).logits.value();
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t c = 0; c < cfg.vocab_size; ++c)
          ASSERT_EQ(pert.at(r, c), base.at(r, c)) << "t=" << t << " row " << r;
      bool changed = false;
      for (std::size_t c = 0; c < cfg.vocab_size; ++c) changed |= pert.at(t, c) != base.at(t, c);
      EXPECT_TRUE(changed) << "t=" << t;
    }
  }
}

TEST(Forward, DeterministicAndDropoutSeeded) {
  const auto cfg = small_config();
  const auto p = init_params<double>(cfg, 4);
  ForwardOptions a;
  a.train = true;
  a.dropout_seed = 11;
  const auto x = forward(cfg, p, kTokens, a).logits.value();
  const auto y = forward(cfg, p, kTokens, a).logits.value();
  EXPECT_EQ(x.vec(), y.vec());
  a.dropout_seed = 12;
  const auto z = forward(cfg, p, kTokens, a).logits.value();
  EXPECT_NE(x.vec(), z.vec());
  const auto eval1 = forward(cfg, p, kTokens).logits.value();
  const auto eval2 = forward(cfg, p, kTokens).logits.value();
  EXPECT_EQ(eval1.vec(), eval2.vec());
}

// With every expert at zero capacity the MoE sublayers contribute nothing,
// so the model must equal an attention-only stack built by hand.
TEST(Forward, AllDropMatchesAttentionOnlyNetwork) {
  const auto cfg = small_config(2);
  const auto p = init_params<double>(cfg, 5);
  ForwardOptions opt;
  opt.capacity_override = 0;
  const auto fr = forward(cfg, p, kTokens, opt);
  EXPECT_DOUBLE_EQ(fr.dropped_fraction, 1.0);

  std::vector<std::size_t> pos(kTokens.size());
  for (std::size_t t = 0; t < pos.size(); ++t) pos[t] = t;
  Var<double> h = gather_rows(p.embed, kTokens);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    h = add(h, attention_block_forward(cfg, p.layers[l], h, pos, kTokens.size(), {}, 0));
  }
  const auto want =
      matmul(layer_norm(h, p.final_norm_gain, p.final_norm_bias), p.unembed).value();
  const auto& got = fr.logits.value();
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Forward, TiedEmbeddingsUseTranspose) {
  auto cfg = small_config();
  cfg.tied_embeddings = true;
  const auto p = init_params<double>(cfg, 6);
  EXPECT_FALSE(p.unembed.defined());
  const auto fr = forward(cfg, p, kTokens);
  EXPECT_EQ(fr.logits.shape(), (Shape{8, 11}));
}

TEST(Init, StandardDeviationOverMillionEntries) {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 1000;
  cfg.n_heads = 10;
  cfg.vocab_size = 1000;
  cfg.moe.n_experts = 1;
  cfg.moe.top_k = 1;
  cfg.moe.d_model = 1000;
  cfg.moe.d_expert = 2;
  const auto p = init_params<float>(cfg, 42);
  const auto& e = p.embed.value();
  ASSERT_EQ(e.size(), 1000000u);
  double s = 0.0, s2 = 0.0;
  for (float v : e.data()) {
    s += v;
    s2 += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(e.size());
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  EXPECT_GE(sd, 0.0099);
  EXPECT_LE(sd, 0.0101);
  EXPECT_EQ(p.layers[0].attn_norm_gain.value()[0], 1.0f);
  EXPECT_EQ(p.layers[0].attn_norm_bias.value()[0], 0.0f);
}

TEST(Init, SeedDeterminism) {
  const auto cfg = small_config();
  const auto a = init_params<float>(cfg, 9), b = init_params<float>(cfg, 9),
             c = init_params<float>(cfg, 10);
  const auto na = a.named(), nb = b.named(), nc = c.named();
  bool differs = false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    EXPECT_EQ(na[i].var.value().vec(), nb[i].var.value().vec()) << na[i].name;
    differs |= na[i].var.value().vec() != nc[i].var.value().vec();
  }
  EXPECT_TRUE(differs);
}

TEST(Init, NormParamsExcludedFromDecay) {
  const auto p = init_params<float>(small_config(), 1);
  for (const auto& np : p.named()) {
    EXPECT_EQ(np.decay, np.name.find("norm") == std::string::npos) << np.name;
  }
}

TEST(Loss, AuxAndZAveragedOverLayers) {
  const auto cfg = small_config();
  const auto p = init_params<double>(cfg, 2);
  const auto fr = forward(cfg, p, kTokens);
  double aux = 0.0, z = 0.0;
  std::vector<std::size_t> pos(kTokens.size());
  for (std::size_t t = 0; t < pos.size(); ++t) pos[t] = t;
  Var<double> h = gather_rows(p.embed, kTokens);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    h = add(h, attention_block_forward(cfg, p.layers[l], h, pos, kTokens.size(), {}, 0));
    MoELayer<double> layer(cfg.moe, p.layers[l].router, p.layers[l].experts);
    auto mo = moe_forward(layer_norm(h, p.layers[l].moe_norm_gain, p.layers[l].moe_norm_bias), layer);
    h = add(h, mo.output);
    aux += mo.aux.item();
    z += mo.z.item();
  }
  EXPECT_NEAR(fr.aux.item(), aux / 2.0, 1e-12);
  EXPECT_NEAR(fr.z.item(), z / 2.0, 1e-12);
}

// Exact protocol: h = 1e-5, 64-bit, denominator max(|a|, |b|, 1e-8).
TEST(FullModelGradCheck, PinnedSeedAllVariants) {
  const double inf = std::numeric_limits<double>::infinity();
  for (std::size_t k : {2u, 4u})
    for (auto order : {SoftmaxOrder::BeforeTopK, SoftmaxOrder::AfterTopK})
      for (double cf : {inf, 0.75}) {
        const auto r = model_grad_check<double>(tiny_check_config(k, order, cf), 5, 1e-5);
        EXPECT_LT(r.max_rel_error, 1e-4) << "k=" << k << " " << to_string(order) << " cf=" << cf;
      }
}

// Other seeds produce gradient entries near 1e-8. Central differences at
// h = 1e-5 resolve about 2e-11 in the loss, so those entries are compared
// with the denominator floored at 1e-5.
TEST(FullModelGradCheck, OtherSeedsFlooredDenominator) {
  const double inf = std::numeric_limits<double>::infinity();
  for (std::uint64_t seed : {1u, 2u, 3u, 4u})
    for (std::size_t k : {2u, 4u})
      for (auto order : {SoftmaxOrder::BeforeTopK, SoftmaxOrder::AfterTopK})
        for (double cf : {inf, 0.75}) {
          const auto r = model_grad_check<double>(tiny_check_config(k, order, cf), seed, 1e-5);
          EXPECT_LT(r.max_rel_error_floor5, 1e-4)
              << "seed=" << seed << " k=" << k << " " << to_string(order) << " cf=" << cf;
        }
}

TEST(FullModelGradCheck, DroppingActuallyOccurs) {
  const auto cfg = tiny_check_config(4, SoftmaxOrder::AfterTopK, 0.75);
  const auto p = init_params<double>(cfg, 5);
  std::vector<std::size_t> toks(cfg.seq_len);
  std::mt19937_64 rng(mix_seed(5, 99));
  for (auto& t : toks) t = rng() % cfg.vocab_size;
  const auto fr = forward(cfg, p, toks);
  EXPECT_GT(fr.dropped_fraction, 0.0);
}
