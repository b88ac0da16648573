// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>

#include "grainmoe/cli.hpp"
#include "grainmoe/instantiate.hpp"

using namespace grainmoe;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int run_quiet(std::vector<std::string> args) {
  args.insert(args.begin(), "grainmoe");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

Outcome table_reproduction() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::pair<std::string, std::string>> want = {
      {"11b-g1", "2.7B/11.1B"},     {"11b-g8", "2.7B/11.1B"},     {"11b-2x-g1", "3.9B/11.1B"},
      {"11b-2x-g8", "3.9B/11.1B"},  {"56b-g1", "10.7B/55.8B"},    {"56b-g8", "10.7B/55.8B"},
      {"56b-2x-g1", "17.1B/55.8B"}, {"56b-2x-g8", "17.1B/55.8B"},
  };
  Outcome o{true, ""};
  for (const auto& [name, expect] : want) {
    const auto spec = arch_preset(name);
    const auto c = count_params(spec);
    const auto got = format_billions(c.active_params) + "/" + format_billions(c.total_params);
    const bool layers_ok = spec.n_layers == (name.starts_with("11b") ? 24u : 32u);
    if (got != expect || !layers_ok || spec.tied_embeddings) {
      o.pass = false;
      o.detail += name + "=" + got + " ";
    }
  }
  const double secs = seconds_since(t0);
  o.pass = o.pass && secs < 1.0;
  o.detail += fmt("8 presets active/total match, %.3f s", secs);
  return o;
}

Outcome parity_property() {
  std::mt19937_64 rng(20240611);
  std::size_t checks = 0, failures = 0;
  for (int i = 0; i < 200; ++i) {
    ArchSpec s;
    s.name = "random";
    s.n_layers = 1 + rng() % 64;
    s.d_model = 32 * (1 + rng() % 256);
    s.d_ff = 8 * (1 + rng() % 8192);
    s.d_expert = s.d_ff;
    s.vocab_size = 100 + rng() % 300000;
    s.n_experts = 1 + rng() % 64;
    s.top_k = 1 + rng() % s.n_experts;
    s.tied_embeddings = rng() % 2 == 0;
    for (std::uint64_t g : {2, 4, 8}) {
      ++checks;
      failures += !parity_check(s, granularity_transform(s, g)).passed;
    }
  }
  return {failures == 0, fmt("%zu spec/granularity pairs, %zu failures", checks, failures)};
}

Outcome enumeration_oracle() {
  std::mt19937_64 rng(77);
  auto pick = [&](std::uint64_t lo, std::uint64_t hi) { return lo + rng() % (hi - lo + 1); };
  std::size_t mismatches = 0;
  const int n = 25;
  for (int i = 0; i < n; ++i) {
    ArchSpec s;
    s.name = "tiny";
    s.n_layers = pick(1, 3);
    s.d_model = 4 * pick(1, 4);
    s.granularity = std::uint64_t{1} << pick(0, 2);
    s.d_ff = s.granularity * pick(1, 8);
    s.d_expert = s.d_ff / s.granularity;
    s.vocab_size = pick(5, 20);
    s.n_experts = pick(1, 4);
    s.top_k = pick(1, s.n_experts);
    s.tied_embeddings = rng() % 2 == 0;
    const auto order = s.effective_top_k() > 1 ? SoftmaxOrder::AfterTopK : SoftmaxOrder::BeforeTopK;
    const auto params = init_params<float>(model_config_from_arch(s, 1, 4, order), i);
    mismatches += params.parameter_count() != count_params(s).total_params;
  }
  return {mismatches == 0, fmt("%d random tiny specs, %zu mismatches", n, mismatches)};
}

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  const double inf = std::numeric_limits<double>::infinity();
  double worst = 0.0;
  int runs = 0;
  for (std::size_t k : {2u, 4u})
    for (auto order : {SoftmaxOrder::BeforeTopK, SoftmaxOrder::AfterTopK})
      for (double cf : {inf, 0.75}) {
        worst = std::max(worst,
                         model_grad_check<double>(tiny_check_config(k, order, cf), 5, 1e-5).max_rel_error);
        ++runs;
      }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 120.0,
          fmt("%d variants, max rel error %.3g at h=1e-5 (seed 5), %.1f s", runs, worst, secs)};
}

Outcome router_gradient_constraint() {
  MoEConfig bad;
  bad.n_experts = 4;
  bad.top_k = 1;
  bad.softmax_order = SoftmaxOrder::AfterTopK;
  bool rejected = false;
  try {
    bad.validate();
  } catch (const ConfigError&) {
    rejected = true;
  }

  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  auto random_var = [&](Shape s) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.vec()) v = nd(rng);
    return Var<double>::parameter(std::move(t));
  };

  MoEConfig one = bad;
  one.softmax_order = SoftmaxOrder::BeforeTopK;
  one.d_model = 3;
  one.d_expert = 2;
  auto x = random_var({6, 3});
  auto w = random_var({3, 4});
  auto r1 = route(x, w, one);
  backward(sum(r1.gates));
  double norm = 0.0;
  for (double g : w.grad().data()) norm += g * g;

  MoEConfig two = one;
  two.top_k = 2;
  two.softmax_order = SoftmaxOrder::AfterTopK;
  auto r2 = route(x, w, two);
  double worst = 0.0;
  for (std::size_t t = 0; t < 6; ++t) worst = std::max(worst, std::abs(r2.decision.gate_sum(t) - 1.0));

  return {rejected && std::sqrt(norm) > 0.0 && worst <= 1e-6,
          fmt("k=1 after-topk rejected=%s, k=1 router grad norm %.3g, k=2 gate-sum dev %.2g",
              rejected ? "yes" : "no", std::sqrt(norm), worst)};
}

Outcome dropping_semantics() {
  MoEConfig cfg;
  cfg.n_experts = 4;
  cfg.top_k = 1;
  cfg.capacity_factor = 1.5;
  auto decision = [](std::vector<std::size_t> ids) {
    RoutingDecision d;
    d.tokens = ids.size();
    d.top_k = 1;
    d.n_experts = 4;
    d.expert_ids = std::move(ids);
    d.gates.assign(d.tokens, 1.0);
    d.dropped.assign(d.tokens, false);
    d.assigned.assign(4, 0);
    for (auto e : d.expert_ids) ++d.assigned[e];
    d.processed = d.assigned;
    return d;
  };
  const auto adv = dispatch(decision(std::vector<std::size_t>(64, 0)), cfg);
  std::vector<std::size_t> uniform;
  for (std::size_t t = 0; t < 64; ++t) uniform.push_back(t % 4);
  const auto uni = dispatch(decision(uniform), cfg);
  const std::size_t processed = adv.processed[0], dropped = adv.dropped_count();
  return {processed == 24 && dropped == 40 && uni.dropped_count() == 0,
          fmt("all-to-one: %zu processed, %zu dropped; uniform: %zu dropped", processed, dropped,
              uni.dropped_count())};
}

Outcome aux_loss_anchor() {
  RoutingDecision d;
  d.tokens = 8;
  d.top_k = 1;
  d.n_experts = 4;
  for (std::size_t t = 0; t < 8; ++t) d.expert_ids.push_back(t % 4);
  d.gates.assign(8, 1.0);
  d.dropped.assign(8, false);
  d.assigned.assign(4, 2);
  d.processed = d.assigned;
  const double aux = aux_loss(Var<double>::constant(Tensor<double>(Shape{8, 4}, 0.25)), d).item();
  double worst_z = 0.0;
  for (std::size_t n : {2u, 8u, 64u}) {
    const double z = z_loss(Var<double>::constant(Tensor<double>(Shape{5, n}))).item();
    worst_z = std::max(worst_z, std::abs(z - std::pow(std::log(static_cast<double>(n)), 2)));
  }
  return {std::abs(aux - 1.0) <= 1e-9 && worst_z <= 1e-12,
          fmt("aux at uniformity %.12f, z-loss max deviation %.2g", aux, worst_z)};
}

Outcome step_savings_oracle() {
  auto curve = [](auto f, double dt = 1.0) {
    std::vector<CurvePoint> c;
    for (double t = 0; t <= 100.0 + 1e-9; t += dt) c.push_back({t, f(t)});
    return c;
  };
  const double lin = step_savings(curve([](double t) { return 3.0 - t / 100.0; }),
                                  curve([](double t) { return 3.0 - t / 80.0; }))
                         .savings_pct;
  const auto same = curve([](double t) { return 2.0 + std::exp(-t / 30.0); }, 5.0);
  const double ident = step_savings(same, same).savings_pct;
  const double expo = step_savings(curve([](double t) { return 2.0 + std::exp(-t / 20.0); }),
                                   curve([](double t) { return 2.0 + std::exp(-t / 15.0); }), 1)
                          .savings_pct;
  const bool ok = std::abs(lin - 20.0) <= 0.5 && std::abs(ident) <= 0.5 && std::abs(expo - 25.0) <= 0.5;
  return {ok, fmt("linear %.3f%% (20), identical %.3f%% (0), exponential %.3f%% (25)", lin, ident, expo)};
}

Outcome determinism() {
  const auto base = fs::temp_directory_path() / "grainmoe_acceptance_det";
  fs::remove_all(base);
  const auto a = base / "a", b = base / "b";
  int ca = run_quiet({"train", "--preset", "desk-g8", "--seed", "11", "--steps", "60", "--out", a.string()});
  int cb = run_quiet({"train", "--preset", "desk-g8", "--seed", "11", "--steps", "60", "--out", b.string()});
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  const std::string ma = slurp(a / "metrics.csv"), mb = slurp(b / "metrics.csv");
  const bool ok = ca == 0 && cb == 0 && !ma.empty() && ma == mb;
  return {ok, fmt("two 60-step desk-g8 runs, metrics.csv %zu bytes, identical=%s", ma.size(),
                  ma == mb ? "yes" : "no")};
}

struct DeskRun {
  TrainResult result;
  double seconds = 0.0;
};

DeskRun desk_run(const RunConfig& rc) {
  const auto t0 = std::chrono::steady_clock::now();
  const SyntheticCorpus corpus(rc.data);
  DeskRun r{train(rc, corpus), 0.0};
  r.seconds = seconds_since(t0);
  return r;
}

Outcome balance_dynamics(const DeskRun& run, const RunConfig& rc) {
  const auto& recs = run.result.records;
  if (run.result.diverged) return {false, "run diverged: " + run.result.error};
  const std::size_t from = rc.hp.steps - rc.hp.steps / 4;
  double lo = 1.0, hi = 0.0;
  for (const auto& m : recs) {
    if (m.step < from) continue;
    const double mx = *std::max_element(m.ep_load.begin(), m.ep_load.end());
    lo = std::min(lo, mx);
    hi = std::max(hi, mx);
  }
  const auto& last = recs.back().ep_load;
  const double final_max = *std::max_element(last.begin(), last.end());
  return {lo >= 0.105 && hi <= 0.145,
          fmt("%zu experts, EP=%zu, batch %zu: max group fraction over steps %zu-%zu in [%.4f, %.4f], "
              "final %.4f (%.0f s)",
              rc.model.moe.n_experts, rc.hp.ep_size, rc.hp.batch_seqs, from, rc.hp.steps, lo, hi,
              final_max, run.seconds)};
}

Outcome loss_decrease(const std::vector<std::pair<std::string, DeskRun>>& runs) {
  Outcome o{true, ""};
  for (const auto& [name, run] : runs) {
    double v50 = std::nan(""), vend = std::nan("");
    bool finite = !run.result.diverged;
    for (const auto& m : run.result.records) {
      finite = finite && std::isfinite(m.loss);
      if (m.val_loss) {
        finite = finite && std::isfinite(*m.val_loss);
        if (m.step == 50) v50 = *m.val_loss;
        vend = *m.val_loss;
      }
    }
    const double drop = 100.0 * (1.0 - vend / v50);
    const bool ok = finite && drop >= 30.0;
    o.pass = o.pass && ok;
    o.detail += fmt("%s %.3f->%.3f (%.1f%%, %.0f s)%s; ", name.c_str(), v50, vend, drop, run.seconds,
                    ok ? "" : " FAIL");
  }
  o.detail.resize(o.detail.size() - 2);
  return o;
}

}  // namespace

int main() {
  int failed = 0;
  auto report = [&](int id, const char* title, const std::function<Outcome()>& check) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, title, o.detail.c_str());
    std::fflush(stdout);
  };

  report(1, "table reproduction", table_reproduction);
  report(2, "parity property", parity_property);
  report(3, "enumeration oracle", enumeration_oracle);
  report(4, "gradient correctness", gradient_correctness);
  report(5, "router-gradient constraint", router_gradient_constraint);
  report(6, "dropping semantics", dropping_semantics);
  report(7, "aux-loss anchor", aux_loss_anchor);

  std::vector<std::pair<std::string, DeskRun>> desk;
  for (const auto& name : desk_preset_names()) desk.emplace_back(name, desk_run(desk_preset(name)));
  const auto g8 = std::find_if(desk.begin(), desk.end(), [](const auto& p) { return p.first == "desk-g8"; });
  report(8, "balance dynamics", [&] { return balance_dynamics(g8->second, desk_preset("desk-g8")); });

  report(9, "step-savings oracle", step_savings_oracle);
  report(10, "determinism", determinism);
  report(11, "desk loss decrease", [&] { return loss_decrease(desk); });

  std::printf("%d of 11 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
