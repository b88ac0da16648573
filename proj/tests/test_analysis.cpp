// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "grainmoe/analysis.hpp"

using namespace grainmoe;
namespace fs = std::filesystem;

namespace {

RoutingDecision decision_from(const std::vector<std::size_t>& experts, std::size_t n_experts,
                              std::size_t k = 1) {
  RoutingDecision d;
  d.tokens = experts.size() / k;
  d.top_k = k;
  d.n_experts = n_experts;
  d.expert_ids = experts;
  d.gates.assign(experts.size(), 1.0 / static_cast<double>(k));
  d.dropped.assign(experts.size(), false);
  d.assigned.assign(n_experts, 0);
  for (auto e : experts) ++d.assigned[e];
  d.processed = d.assigned;
  return d;
}

std::vector<CurvePoint> line(double a, double b, double t0, double t1, double dt) {
  std::vector<CurvePoint> out;
  for (double t = t0; t <= t1 + 1e-9; t += dt) out.push_back({t, a + b * t});
  return out;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("grainmoe_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(EpLoad, UniformSixtyFourExperts) {
  std::vector<std::size_t> ids;
  for (std::size_t t = 0; t < 640; ++t) ids.push_back(t % 64);
  const auto f = ep_load_fractions(decision_from(ids, 64), 8);
  for (double x : f) EXPECT_DOUBLE_EQ(x, 0.125);
}

TEST(EpLoad, AllToExpertZero) {
  const auto f = ep_load_fractions(decision_from(std::vector<std::size_t>(10, 0), 8), 4);
  EXPECT_EQ(f, (std::vector<double>{1.0, 0.0, 0.0, 0.0}));
}

TEST(EpLoad, CountingOracle) {
  // 8 experts, 4 groups of 2; 16 selections split 7, 5, 3, 1.
  std::vector<std::size_t> ids = {0, 1, 0, 1, 0, 1, 0, 2, 3, 2, 3, 2, 4, 5, 4, 7};
  const auto f = ep_load_fractions(decision_from(ids, 8), 4);
  EXPECT_DOUBLE_EQ(f[0], 0.4375);
  EXPECT_DOUBLE_EQ(f[1], 0.3125);
  EXPECT_DOUBLE_EQ(f[2], 0.1875);
  EXPECT_DOUBLE_EQ(f[3], 0.0625);
}

TEST(EpLoad, NonDivisibleRejected) {
  EXPECT_THROW(ep_load_fractions(decision_from({0, 1}, 6), 4), ConfigError);
}

TEST(EpLoad, SumsToOneForRandomDecisions) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::size_t> ids(1 + rng() % 200);
    for (auto& e : ids) e = rng() % 32;
    double s = 0.0;
    for (double x : ep_load_fractions(decision_from(ids, 32), 8)) s += x;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(LogitRanks, MedianOracle) {
  const auto s = logit_rank_medians({{0.7, 0.3}, {0.5, 0.5}}, 1, 40);
  EXPECT_EQ(s.layer, 1u);
  EXPECT_EQ(s.step, 40u);
  EXPECT_DOUBLE_EQ(s.medians[0], 0.6);
  EXPECT_DOUBLE_EQ(s.medians[1], 0.4);
}

TEST(LogitRanks, SingleExpertDominates) {
  const auto s = logit_rank_medians({{1.0, 0.0, 0.0}, {1.0, 0.0, 0.0}, {1.0, 0.0, 0.0}}, 0, 0);
  EXPECT_EQ(s.medians, (std::vector<double>{1.0, 0.0, 0.0}));
}

TEST(LogitRanks, SingleTokenAndRagged) {
  EXPECT_EQ(logit_rank_medians({{0.5, 0.3, 0.2}}, 0, 0).medians,
            (std::vector<double>{0.5, 0.3, 0.2}));
  EXPECT_THROW(logit_rank_medians({{0.5, 0.5}, {1.0}}, 0, 0), ConfigError);
}

TEST(LogitRanks, SortedGateListsDescend) {
  auto d = decision_from({0, 1, 2, 3}, 4, 2);
  d.gates = {0.2, 0.8, 0.6, 0.4};
  const auto g = sorted_gate_lists(d);
  EXPECT_EQ(g[0], (std::vector<double>{0.8, 0.2}));
  EXPECT_EQ(g[1], (std::vector<double>{0.6, 0.4}));
}

TEST(StepSavings, LinearCrossingIsTwentyPercent) {
  const auto base = line(3.0, -1.0 / 100.0, 0, 100, 1);
  const auto var = line(3.0, -1.0 / 80.0, 0, 100, 1);
  const auto r = step_savings(base, var);
  EXPECT_NEAR(r.target_loss, 2.0, 1e-12);
  EXPECT_NEAR(r.crossing_step, 80.0, 1e-9);
  EXPECT_NEAR(r.savings_pct, 20.0, 1e-9);
}

TEST(StepSavings, CoarseGridInterpolates) {
  // Grid of 10 steps: 80 falls on a grid point, 60 lies between points for 1/60 slope... use 3-t/70.
  const auto base = line(3.0, -1.0 / 100.0, 0, 100, 10);
  const auto var = line(3.0, -1.0 / 75.0, 0, 100, 10);
  EXPECT_NEAR(step_savings(base, var).savings_pct, 25.0, 0.5);
}

TEST(StepSavings, IdenticalCurvesSaveNothing) {
  std::vector<CurvePoint> c;
  for (int i = 0; i <= 40; ++i) c.push_back({50.0 * i, 2.0 + 3.0 * std::exp(-i / 10.0)});
  EXPECT_NEAR(step_savings(c, c).savings_pct, 0.0, 1e-12);
}

TEST(StepSavings, ExponentialClosedForm) {
  // L_b = 2 + e^{-t/20}, L_v = 2 + e^{-t/15} on [0, 100]; smoothing is
  // disabled so the crossing of e^{-5} is at t = 75, i.e. 25% savings.
  std::vector<CurvePoint> b, v;
  for (int t = 0; t <= 100; ++t) {
    b.push_back({double(t), 2.0 + std::exp(-t / 20.0)});
    v.push_back({double(t), 2.0 + std::exp(-t / 15.0)});
  }
  EXPECT_NEAR(step_savings(b, v, 1).savings_pct, 25.0, 0.5);
  EXPECT_NEAR(step_savings(b, v, 5).savings_pct, 25.0, 0.5);
}

TEST(StepSavings, AffineStepAxisInvariance) {
  std::vector<CurvePoint> b, v, b2, v2;
  for (int i = 0; i <= 60; ++i) {
    const double t = i;
    b.push_back({t, 3.0 - t / 60.0 + 0.01 * std::sin(t)});
    v.push_back({t, 3.0 - t / 45.0 + 0.01 * std::cos(t)});
    b2.push_back({7.0 * t + 100.0, b.back().loss});
    v2.push_back({7.0 * t + 100.0, v.back().loss});
  }
  EXPECT_NEAR(step_savings(b, v).savings_pct, step_savings(b2, v2).savings_pct, 1e-9);
}

TEST(StepSavings, UnreachedTarget) {
  const auto base = line(3.0, -1.0 / 80.0, 0, 100, 1);
  const auto var = line(3.0, -1.0 / 100.0, 0, 100, 1);
  try {
    step_savings(base, var);
    FAIL() << "expected TargetUnreached";
  } catch (const TargetUnreached& e) {
    EXPECT_STREQ(e.what(), "no savings: target unreached");
  }
}

TEST(StepSavings, GridMismatchRejected) {
  EXPECT_THROW(step_savings(line(3, -0.01, 0, 100, 1), line(3, -0.01, 0, 100, 2)), ConfigError);
  auto shifted = line(3, -0.01, 0, 100, 1);
  for (auto& p : shifted) p.step += 1.0;
  EXPECT_THROW(step_savings(line(3, -0.01, 0, 100, 1), shifted), ConfigError);
}

TEST(Smoothing, EdgesShrinkSymmetrically) {
  const auto s = smooth_centered({1, 2, 3, 4, 5, 6}, 5);
  EXPECT_EQ(s, (std::vector<double>{1, 2, 3, 4, 5, 6}));
  const auto t = smooth_centered({0, 0, 10, 0, 0}, 5);
  EXPECT_DOUBLE_EQ(t[2], 2.0);
  EXPECT_DOUBLE_EQ(t[1], 10.0 / 3.0);
  EXPECT_DOUBLE_EQ(t[0], 0.0);
}

TEST(Median, EvenAndOdd) {
  EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
  EXPECT_DOUBLE_EQ(median({4, 1, 3, 2}), 2.5);
  EXPECT_THROW(median({}), ConfigError);
}

TEST(Export, MetricsRoundTrip) {
  const auto dir = temp_dir("metrics");
  std::vector<MetricRecord> recs(3);
  for (std::size_t i = 0; i < 3; ++i) {
    recs[i].step = i;
    recs[i].loss = 4.0 - 0.1 * static_cast<double>(i);
    recs[i].lr = 1e-3 * static_cast<double>(i);
    recs[i].aux_loss = 1.01;
    recs[i].z_loss = 0.2;
    recs[i].dropped_frac = 0.03125;
    recs[i].grad_norm = 0.5;
    recs[i].ep_load.assign(8, 0.125);
  }
  recs[0].val_loss = 4.25;
  write_metrics_csv((dir / "metrics.csv").string(), recs, 8);
  const auto back = read_metrics_csv((dir / "metrics.csv").string());
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(metrics_csv_row(back[i]), metrics_csv_row(recs[i]));
  EXPECT_TRUE(back[0].val_loss.has_value());
  EXPECT_FALSE(back[1].val_loss.has_value());

  std::ifstream in(dir / "metrics.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header,
            "step,loss,val_loss,lr,aux_loss,z_loss,dropped_frac,grad_norm,ep_load_0,ep_load_1,"
            "ep_load_2,ep_load_3,ep_load_4,ep_load_5,ep_load_6,ep_load_7");
}

TEST(Export, EpLoadSixDecimalsStillSumToOne) {
  const auto dir = temp_dir("epload");
  std::mt19937_64 rng(9);
  std::vector<MetricRecord> recs(20);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    recs[i].step = i;
    std::vector<std::size_t> ids(333);
    for (auto& e : ids) e = rng() % 64;
    recs[i].ep_load = ep_load_fractions(decision_from(ids, 64), 8);
  }
  write_ep_load_csv((dir / "ep_load.csv").string(), recs);
  const auto rows = read_ep_load_csv((dir / "ep_load.csv").string());
  ASSERT_EQ(rows.size(), 20u * 8u);
  for (std::size_t i = 0; i < 20; ++i) {
    double s = 0.0;
    for (std::size_t g = 0; g < 8; ++g) s += rows[i * 8 + g].fraction;
    EXPECT_NEAR(s, 1.0, 5e-6);
  }
}

TEST(Export, LogitRanksRoundTrip) {
  const auto dir = temp_dir("ranks");
  std::vector<LogitRankSnapshot> snaps = {{0, 0, {0.5, 0.25}}, {50, 1, {0.75, 0.125}}};
  write_logit_ranks_json((dir / "logit_ranks.json").string(), snaps);
  const auto back = read_logit_ranks_json((dir / "logit_ranks.json").string());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].step, 50u);
  EXPECT_EQ(back[1].layer, 1u);
  EXPECT_EQ(back[1].medians, snaps[1].medians);
}

TEST(Export, ValidationCurveSkipsRowsWithoutVal) {
  std::vector<MetricRecord> recs(4);
  for (std::size_t i = 0; i < 4; ++i) recs[i].step = i;
  recs[0].val_loss = 3.0;
  recs[2].val_loss = 2.5;
  const auto c = validation_curve(recs);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[1].step, 2.0);
  EXPECT_EQ(c[1].loss, 2.5);
}
