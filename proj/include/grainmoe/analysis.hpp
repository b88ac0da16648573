// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

// Diagnostics over training runs: expert-parallel group load, per-rank gate
// medians, and step savings between validation curves. Also the CSV/JSON
// files these are exchanged through.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "grainmoe/moe.hpp"

namespace grainmoe {

/// One training step.
struct MetricRecord {
  std::size_t step = 0;
  double loss = 0.0;  // task loss on the training batch
  std::optional<double> val_loss;
  double lr = 0.0;
  double aux_loss = 0.0;
  double z_loss = 0.0;
  double dropped_frac = 0.0;
  double grad_norm = 0.0;  // before clipping
  std::vector<double> ep_load;                       // mean over layers
  std::vector<std::vector<double>> ep_load_by_layer;  // not serialized to metrics.csv
};

struct LogitRankSnapshot {
  std::size_t step = 0;
  std::size_t layer = 0;
  std::vector<double> medians;  // index r = rank r+1
};

/// Share of pre-drop assignments handled by each expert-parallel group.
/// Group g owns experts [g * E / ep, (g + 1) * E / ep).
inline std::vector<double> ep_load_fractions(const RoutingDecision& d, std::size_t ep_size) {
  if (ep_size == 0 || d.n_experts % ep_size != 0) {
    throw ConfigError("ep_size " + std::to_string(ep_size) + " must divide expert count " +
                      std::to_string(d.n_experts));
  }
  const std::size_t per_group = d.n_experts / ep_size;
  std::vector<double> out(ep_size, 0.0);
  std::size_t total = 0;
  for (std::size_t e = 0; e < d.n_experts; ++e) {
    out[e / per_group] += static_cast<double>(d.assigned[e]);
    total += d.assigned[e];
  }
  if (total == 0) throw ConfigError("ep_load_fractions: decision has no assignments");
  for (auto& v : out) v /= static_cast<double>(total);
  return out;
}

/// Median of v (mean of the two middle values for even sizes).
inline double median(std::vector<double> v) {
  if (v.empty()) throw ConfigError("median of empty list");
  const std::size_t n = v.size(), mid = n / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (n % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

/// Per-rank medians over tokens of descending gate lists.
inline LogitRankSnapshot logit_rank_medians(const std::vector<std::vector<double>>& gates,
                                            std::size_t layer, std::size_t step) {
  if (gates.empty()) throw ConfigError("logit_rank_medians: no tokens");
  const std::size_t k = gates.front().size();
  for (const auto& g : gates) {
    if (g.size() != k) throw ConfigError("logit_rank_medians: ragged gate lists");
  }
  LogitRankSnapshot snap{step, layer, {}};
  std::vector<double> column(gates.size());
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t t = 0; t < gates.size(); ++t) column[t] = gates[t][r];
    snap.medians.push_back(median(column));
  }
  return snap;
}

/// Gate lists of a decision, one per token, sorted descending.
inline std::vector<std::vector<double>> sorted_gate_lists(const RoutingDecision& d) {
  std::vector<std::vector<double>> out(d.tokens);
  for (std::size_t t = 0; t < d.tokens; ++t) {
    out[t].assign(d.gates.begin() + static_cast<std::ptrdiff_t>(t * d.top_k),
                  d.gates.begin() + static_cast<std::ptrdiff_t>((t + 1) * d.top_k));
    std::sort(out[t].begin(), out[t].end(), std::greater<>());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Step savings

struct CurvePoint {
  double step;
  double loss;
};

class TargetUnreached : public std::runtime_error {
 public:
  TargetUnreached() : std::runtime_error("no savings: target unreached") {}
};

struct SavingsResult {
  double target_loss = 0.0;
  double crossing_step = 0.0;
  double savings_pct = 0.0;
};

/// Centered moving average; the window shrinks symmetrically near the ends
/// so that straight lines pass through unchanged.
inline std::vector<double> smooth_centered(const std::vector<double>& v, std::size_t window) {
  const std::size_t half = window / 2;
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t h = std::min({half, i, v.size() - 1 - i});
    double s = 0.0;
    for (std::size_t j = i - h; j <= i + h; ++j) s += v[j];
    out[i] = s / static_cast<double>(2 * h + 1);
  }
  return out;
}

/// Percentage of the baseline's steps the variant saves in reaching the
/// baseline's final (smoothed) loss. Steps are measured from the first grid
/// point; the crossing is linearly interpolated between grid points.
inline SavingsResult step_savings(const std::vector<CurvePoint>& baseline,
                                  const std::vector<CurvePoint>& variant,
                                  std::size_t smoothing_window = 5) {
  if (baseline.size() < 2) throw ConfigError("step_savings: need at least two points");
  if (baseline.size() != variant.size()) throw ConfigError("step_savings: curves differ in length");
  for (std::size_t i = 0; i < baseline.size(); ++i) {
    if (baseline[i].step != variant[i].step) throw ConfigError("step_savings: curves use different grids");
    if (i > 0 && !(baseline[i].step > baseline[i - 1].step)) {
      throw ConfigError("step_savings: steps must increase");
    }
  }
  std::vector<double> b, v;
  for (const auto& p : baseline) b.push_back(p.loss);
  for (const auto& p : variant) v.push_back(p.loss);
  b = smooth_centered(b, smoothing_window);
  v = smooth_centered(v, smoothing_window);

  SavingsResult res;
  res.target_loss = b.back();
  const double t0 = baseline.front().step, total = baseline.back().step - t0;
  for (std::size_t j = 0; j < v.size(); ++j) {
    if (v[j] > res.target_loss) continue;
    double s = baseline[j].step;
    if (j > 0 && v[j] != v[j - 1]) {
      const double frac = (res.target_loss - v[j - 1]) / (v[j] - v[j - 1]);
      s = baseline[j - 1].step + frac * (baseline[j].step - baseline[j - 1].step);
    }
    res.crossing_step = s;
    res.savings_pct = 100.0 * (1.0 - (s - t0) / total);
    return res;
  }
  throw TargetUnreached();
}

// ---------------------------------------------------------------------------
// Files

namespace detail {

inline std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  return out;
}

}  // namespace detail

inline std::string metrics_csv_header(std::size_t ep_size) {
  std::string h = "step,loss,val_loss,lr,aux_loss,z_loss,dropped_frac,grad_norm";
  for (std::size_t g = 0; g < ep_size; ++g) h += ",ep_load_" + std::to_string(g);
  return h;
}

inline std::string metrics_csv_row(const MetricRecord& r) {
  std::string row = std::to_string(r.step);
  row += "," + detail::fmt("%.9g", r.loss);
  row += "," + (r.val_loss ? detail::fmt("%.9g", *r.val_loss) : std::string());
  row += "," + detail::fmt("%.9g", r.lr);
  row += "," + detail::fmt("%.9g", r.aux_loss);
  row += "," + detail::fmt("%.9g", r.z_loss);
  row += "," + detail::fmt("%.6f", r.dropped_frac);
  row += "," + detail::fmt("%.9g", r.grad_norm);
  for (double f : r.ep_load) row += "," + detail::fmt("%.6f", f);
  return row;
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricRecord>& records,
                              std::size_t ep_size) {
  auto out = detail::open_out(path);
  out << metrics_csv_header(ep_size) << '\n';
  for (const auto& r : records) out << metrics_csv_row(r) << '\n';
}

inline std::vector<MetricRecord> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty metrics file: " + path);
  const auto header = detail::split_csv(line);
  if (header.size() < 8 || header[0] != "step") throw std::runtime_error("bad metrics header in " + path);
  const std::size_t ep = header.size() - 8;
  std::vector<MetricRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = detail::split_csv(line);
    if (c.size() != header.size()) throw std::runtime_error("bad metrics row: " + line);
    MetricRecord r;
    r.step = std::stoul(c[0]);
    r.loss = std::stod(c[1]);
    if (!c[2].empty()) r.val_loss = std::stod(c[2]);
    r.lr = std::stod(c[3]);
    r.aux_loss = std::stod(c[4]);
    r.z_loss = std::stod(c[5]);
    r.dropped_frac = std::stod(c[6]);
    r.grad_norm = std::stod(c[7]);
    for (std::size_t g = 0; g < ep; ++g) r.ep_load.push_back(std::stod(c[8 + g]));
    out.push_back(std::move(r));
  }
  return out;
}

struct EpLoadRow {
  std::size_t step;
  std::size_t group;
  double fraction;
};

inline void write_ep_load_csv(const std::string& path, const std::vector<MetricRecord>& records) {
  auto out = detail::open_out(path);
  out << "step,group,fraction\n";
  for (const auto& r : records)
    for (std::size_t g = 0; g < r.ep_load.size(); ++g)
      out << r.step << ',' << g << ',' << detail::fmt("%.6f", r.ep_load[g]) << '\n';
}

inline std::vector<EpLoadRow> read_ep_load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  std::getline(in, line);
  if (line != "step,group,fraction") throw std::runtime_error("bad ep_load header in " + path);
  std::vector<EpLoadRow> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = detail::split_csv(line);
    if (c.size() != 3) throw std::runtime_error("bad ep_load row: " + line);
    out.push_back({std::stoul(c[0]), std::stoul(c[1]), std::stod(c[2])});
  }
  return out;
}

inline void to_json(nlohmann::json& j, const LogitRankSnapshot& s) {
  j = nlohmann::json{{"step", s.step}, {"layer", s.layer}, {"medians", s.medians}};
}

inline void from_json(const nlohmann::json& j, LogitRankSnapshot& s) {
  j.at("step").get_to(s.step);
  j.at("layer").get_to(s.layer);
  j.at("medians").get_to(s.medians);
}

inline void write_logit_ranks_json(const std::string& path,
                                   const std::vector<LogitRankSnapshot>& snaps) {
  auto out = detail::open_out(path);
  out << nlohmann::json(snaps).dump(2) << '\n';
}

inline std::vector<LogitRankSnapshot> read_logit_ranks_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return nlohmann::json::parse(in).get<std::vector<LogitRankSnapshot>>();
}

/// Validation curve (step, val_loss) from the records that carry one.
inline std::vector<CurvePoint> validation_curve(const std::vector<MetricRecord>& records) {
  std::vector<CurvePoint> out;
  for (const auto& r : records)
    if (r.val_loss) out.push_back({static_cast<double>(r.step), *r.val_loss});
  return out;
}

}  // namespace grainmoe
