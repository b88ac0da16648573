// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

// Command line front end: plan, train, analyze, gradcheck.
// Exit codes: 0 ok, 1 invalid input, 2 runtime failure.

#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "grainmoe/analysis.hpp"
#include "grainmoe/checkpoint.hpp"
#include "grainmoe/configplan.hpp"
#include "grainmoe/model_gradcheck.hpp"
#include "grainmoe/runconfig.hpp"
#include "grainmoe/train.hpp"

namespace grainmoe {

enum ExitCode : int { kExitOk = 0, kExitInvalid = 1, kExitRuntime = 2 };

namespace cli {

namespace fs = std::filesystem;

struct PlanArgs {
  std::string preset;
  std::string config;
  std::string out;
  bool json = false;
};

struct TrainArgs {
  std::string preset;
  std::string config;
  std::string out;
  std::string continue_from;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> ep_size;
};

struct AnalyzeArgs {
  std::string run;
  std::string baseline;
  std::string out;
  std::optional<std::size_t> ep_size;
  std::size_t window = 5;
};

struct GradcheckArgs {
  std::uint64_t seed = 5;
};

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + p.string());
  out << text;
}

inline int cmd_plan(const PlanArgs& a, std::ostream& out) {
  if (!a.preset.empty() && !a.config.empty()) throw ConfigError("use either --preset or --config");
  std::vector<ArchSpec> specs;
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw ConfigError("cannot open config " + a.config);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + a.config + ": " + e.what());
    }
    try {
      specs.push_back(j.get<ArchSpec>());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + a.config + ": " + e.what());
    }
  } else if (!a.preset.empty()) {
    specs.push_back(arch_preset(a.preset));
  } else {
    for (const auto& n : arch_preset_names()) specs.push_back(arch_preset(n));
  }

  nlohmann::json report = nlohmann::json::array();
  if (specs.size() > 1) out << "preset: experts, top-k, active, d_model, d_expert, total\n";
  for (const auto& s : specs) {
    const auto c = count_params(s);
    if (specs.size() > 1) out << s.name << ": ";
    out << plan_table_row(s, c) << '\n';
    report.push_back(count_report_json(s, c));
  }
  const nlohmann::json doc = specs.size() == 1 ? report[0] : report;
  if (a.json) out << doc.dump(2) << '\n';
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_text(fs::path(a.out) / "plan.json", doc.dump(2) + "\n");
  }
  return kExitOk;
}

inline RunConfig resolve_run_config(const TrainArgs& a) {
  if (!a.preset.empty() && !a.config.empty()) throw ConfigError("use either --preset or --config");
  if (a.preset.empty() && a.config.empty()) throw ConfigError("train needs --preset or --config");
  RunConfig rc = a.config.empty() ? desk_preset(a.preset) : read_run_config(a.config);
  if (a.seed) {
    rc.hp.seed = *a.seed;
    rc.data.seed = *a.seed;
  }
  if (a.steps) rc.hp.steps = *a.steps;
  if (a.ep_size) rc.hp.ep_size = *a.ep_size;
  rc.validate();
  return rc;
}

inline void write_run_outputs(const fs::path& dir, const RunConfig& rc, const TrainResult& r) {
  write_metrics_csv((dir / "metrics.csv").string(), r.records, rc.hp.ep_size);
  write_logit_ranks_json((dir / "logit_ranks.json").string(), r.snapshots);
  if (!r.diverged) save_checkpoint((dir / "checkpoint.bin").string(), r.params.named());
}

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  if (a.out.empty()) throw ConfigError("train needs --out");
  const fs::path dir(a.out);

  RunConfig rc;
  std::optional<ScheduleSpec> prior;
  ModelParams<float> params;
  if (!a.continue_from.empty()) {
    if (!a.preset.empty() || !a.config.empty()) {
      throw ConfigError("--continue-from takes its config from the earlier run");
    }
    const fs::path src(a.continue_from);
    rc = read_run_config((src / "config.json").string());
    if (a.seed) {
      rc.hp.seed = *a.seed;
      rc.data.seed = *a.seed;
    }
    if (a.ep_size) rc.hp.ep_size = *a.ep_size;
    rc.validate();
    params = init_params<float>(rc.model, 0);
    auto named = params.named();
    restore_checkpoint((src / "checkpoint.bin").string(), named);
    prior = main_schedule(rc.hp.peak_lr, rc.hp.steps, rc.hp.warmup_frac, rc.hp.end_ratio);
  } else {
    rc = resolve_run_config(a);
  }

  fs::create_directories(dir);
  write_run_config((dir / "config.json").string(), rc);

  const SyntheticCorpus corpus(rc.data);
  TrainResult r = prior ? continue_pretraining(rc, corpus, std::move(params), *prior)
                        : train(rc, corpus);
  write_run_outputs(dir, rc, r);
  if (r.diverged) {
    err << "training diverged: " << r.error << " (partial metrics in " << (dir / "metrics.csv").string()
        << ")\n";
    return kExitRuntime;
  }
  const auto curve = validation_curve(r.records);
  out << "steps " << r.schedule.steps << ", val_loss " << curve.front().loss << " -> "
      << curve.back().loss << ", final lr " << r.records.back().lr << '\n';
  return kExitOk;
}

inline int cmd_analyze(const AnalyzeArgs& a, std::ostream& out, std::ostream& err) {
  const fs::path run(a.run);
  const fs::path dest = a.out.empty() ? run : fs::path(a.out);
  const auto records = read_metrics_csv((run / "metrics.csv").string());
  if (records.empty()) throw ConfigError("no records in " + (run / "metrics.csv").string());
  const std::size_t ep = records.front().ep_load.size();
  if (a.ep_size && *a.ep_size != ep) {
    throw ConfigError("--ep-size " + std::to_string(*a.ep_size) + " does not match the " +
                      std::to_string(ep) + " groups recorded in the run");
  }
  fs::create_directories(dest);
  write_ep_load_csv((dest / "ep_load.csv").string(), records);
  std::vector<LogitRankSnapshot> snaps;
  if (fs::exists(run / "logit_ranks.json")) snaps = read_logit_ranks_json((run / "logit_ranks.json").string());
  write_logit_ranks_json((dest / "logit_ranks.json").string(), snaps);

  double late_max = 0.0;
  for (std::size_t i = records.size() * 3 / 4; i < records.size(); ++i)
    for (double f : records[i].ep_load) late_max = std::max(late_max, f);
  out << "records " << records.size() << ", ep groups " << ep << ", max ep load (final quarter) "
      << late_max << '\n';

  if (!a.baseline.empty()) {
    const auto base = read_metrics_csv((fs::path(a.baseline) / "metrics.csv").string());
    nlohmann::json report;
    try {
      const auto s = step_savings(validation_curve(base), validation_curve(records), a.window);
      report = {{"target_loss", s.target_loss},
                {"crossing_step", s.crossing_step},
                {"savings_pct", s.savings_pct}};
      out << "savings " << s.savings_pct << "% (target " << s.target_loss << " reached at step "
          << s.crossing_step << ")\n";
    } catch (const TargetUnreached& e) {
      report = {{"target_loss", nullptr}, {"crossing_step", nullptr}, {"savings_pct", nullptr},
                {"error", e.what()}};
      err << e.what() << '\n';
    }
    write_text(dest / "savings.json", report.dump(2) + "\n");
  }
  return kExitOk;
}

/// Precision comes from GRAINMOE_PRECISION (f64 default). At 32 bits the
/// finite differences are too coarse to judge, so that mode only reports.
inline int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  const char* env = std::getenv("GRAINMOE_PRECISION");
  const std::string prec = env ? env : "f64";
  if (prec != "f32" && prec != "f64") {
    throw ConfigError("GRAINMOE_PRECISION must be f32 or f64, got '" + prec + "'");
  }
  const double inf = std::numeric_limits<double>::infinity();
  bool ok = true;
  for (std::size_t k : {2u, 4u}) {
    for (auto order : {SoftmaxOrder::BeforeTopK, SoftmaxOrder::AfterTopK}) {
      for (double cf : {inf, 0.75}) {
        const auto cfg = tiny_check_config(k, order, cf);
        const auto r = prec == "f64" ? model_grad_check<double>(cfg, a.seed, 1e-5)
                                     : model_grad_check<float>(cfg, a.seed, 1e-2);
        const bool pass = prec == "f32" || r.max_rel_error < 1e-4;
        ok = ok && pass;
        out << prec << " k=" << k << " " << to_string(order) << " cf=" << cf
            << " max_rel_error=" << r.max_rel_error << (pass ? "" : " FAIL") << '\n';
      }
    }
  }
  return ok ? kExitOk : kExitRuntime;
}

}  // namespace cli

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"grainmoe: fine-grained mixture-of-experts planning, training and analysis"};
  app.require_subcommand(1);

  cli::PlanArgs plan_args;
  auto* plan = app.add_subcommand("plan", "parameter and FLOP counts for an architecture");
  plan->add_option("--preset", plan_args.preset, "architecture preset (omit to list all)");
  plan->add_option("--config", plan_args.config, "architecture JSON file");
  plan->add_option("--out", plan_args.out, "directory for plan.json");
  plan->add_flag("--json", plan_args.json, "also print the JSON report");

  cli::TrainArgs train_args;
  auto* trn = app.add_subcommand("train", "train a desk-scale model on synthetic data");
  trn->add_option("--preset", train_args.preset, "desk preset: desk-g1, desk-g8, desk-2x-g1, desk-2x-g8");
  trn->add_option("--config", train_args.config, "run config JSON (for example a resolved config.json)");
  trn->add_option("--out", train_args.out, "output directory")->required();
  trn->add_option("--seed", train_args.seed, "seed for init, batches, dropout and data");
  trn->add_option("--steps", train_args.steps, "override the number of steps");
  trn->add_option("--ep-size", train_args.ep_size, "expert-parallel groups for load metrics");
  trn->add_option("--continue-from", train_args.continue_from,
                  "continue pretraining from a finished run directory");

  cli::AnalyzeArgs analyze_args;
  auto* ana = app.add_subcommand("analyze", "export load, gate-rank and step-savings data");
  ana->add_option("--run", analyze_args.run, "run directory")->required();
  ana->add_option("--baseline", analyze_args.baseline, "baseline run directory for step savings");
  ana->add_option("--out", analyze_args.out, "output directory (default: the run directory)");
  ana->add_option("--ep-size", analyze_args.ep_size, "expected number of expert-parallel groups");
  ana->add_option("--window", analyze_args.window, "smoothing window in validation points");

  cli::GradcheckArgs gc_args;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the full tiny model");
  gc->add_option("--seed", gc_args.seed, "parameter and token seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (*plan) return cli::cmd_plan(plan_args, out);
    if (*trn) return cli::cmd_train(train_args, out, err);
    if (*ana) return cli::cmd_analyze(analyze_args, out, err);
    if (*gc) return cli::cmd_gradcheck(gc_args, out);
  } catch (const std::invalid_argument& e) {  // ConfigError, ShapeError
    err << "error: " << e.what() << "\n\n" << app.get_subcommands().front()->help();
    return kExitInvalid;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n\n" << app.get_subcommands().front()->help();
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "failure: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitInvalid;
}

}  // namespace grainmoe
