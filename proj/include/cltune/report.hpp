// Copyright (c) 2026 cltune contributors
// SPDX-License-Identifier: Apache-2.0
//
// Derives the figure and table CSVs purely from metrics JSONL files.
#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cltune/experiment.hpp"
#include "cltune/metrics.hpp"

namespace cltune {

namespace detail {

inline std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

inline const std::vector<std::string>& report_run_order() {
  static const std::vector<std::string> order = {"pretrain", "sdt", "rh", "l2",
                                                 "ewc",      "gem", "dis"};
  return order;
}

struct ReportResult {
  std::string loss_curves_csv;
  std::string summary_csv;
  std::string probe_sweep_csv;
  int eval_events = 0;
};

/// Builds the report from whatever runs exist under the experiment's
/// output directory. Refuses to mix artifacts whose embedded config digest
/// differs from the experiment's.
inline ReportResult build_report(const ExperimentConfig& exp) {
  struct Run {
    std::string name;
    std::vector<nlohmann::json> records;
  };
  std::vector<Run> runs;
  for (const auto& name : report_run_order()) {
    const auto path = exp.metrics_path(name);
    if (!std::filesystem::exists(path)) continue;
    runs.push_back({name, read_jsonl(path)});
  }
  if (runs.empty()) throw MissingArtifactError("no runs found under " + exp.output_dir.string());

  for (const auto& run : runs) {
    for (const auto& j : run.records) {
      if (j.value("phase", "") != "meta") continue;
      const auto digest = j.value("config_digest", "");
      if (digest != exp.digest)
        throw ConfigError("refusing to mix artifacts: run '" + run.name + "' has config digest " +
                          digest + ", expected " + exp.digest);
    }
  }

  ReportResult out;
  out.loss_curves_csv = "step,strategy,source_val_loss,target_val_loss\n";
  for (const auto& run : runs) {
    for (const auto& j : run.records) {
      if (!j.contains("eval_losses") || j.value("phase", "") == "probe") continue;
      const auto& ev = j.at("eval_losses");
      out.loss_curves_csv += std::to_string(j.at("step").get<long>());
      out.loss_curves_csv += ",";
      out.loss_curves_csv += run.name;
      out.loss_curves_csv += ",";
      if (ev.contains("source_val"))
        out.loss_curves_csv += detail::fmt_double(ev.at("source_val").get<double>());
      out.loss_curves_csv += ",";
      if (ev.contains("target_val"))
        out.loss_curves_csv += detail::fmt_double(ev.at("target_val").get<double>());
      out.loss_curves_csv += "\n";
      out.eval_events += 1;
    }
  }

  const std::vector<std::string> probe_keys = {
      "probe_target_accuracy", "probe_source_accuracy", "shift_in_domain_accuracy",
      "shift_accuracy",        "mi_gap_vs_sdt"};
  out.summary_csv =
      "strategy,delta_source_val,final_source_val,final_target_val,probe_target_accuracy,"
      "probe_source_accuracy,shift_in_domain_accuracy,shift_accuracy,mi_gap_vs_sdt\n";
  out.probe_sweep_csv = "strategy,metric,train_fraction,value\n";

  for (const auto& run : runs) {
    if (run.name == "pretrain") continue;
    std::optional<double> first_src, last_src, last_tgt;
    std::map<std::string, double> probe_at_full;
    for (const auto& j : run.records) {
      if (j.value("phase", "") == "probe" && j.contains("eval_losses")) {
        const auto& ev = j.at("eval_losses");
        const double fraction = ev.value("train_fraction", 1.0);
        for (const auto& key : probe_keys) {
          if (!ev.contains(key)) continue;
          const double v = ev.at(key).get<double>();
          out.probe_sweep_csv += run.name + "," + key + "," + detail::fmt_double(fraction) + "," +
                                 detail::fmt_double(v) + "\n";
          if (fraction == 1.0) probe_at_full[key] = v;
        }
        continue;
      }
      if (!j.contains("eval_losses")) continue;
      const auto& ev = j.at("eval_losses");
      if (ev.contains("source_val")) {
        if (!first_src) first_src = ev.at("source_val").get<double>();
        last_src = ev.at("source_val").get<double>();
      }
      if (ev.contains("target_val")) last_tgt = ev.at("target_val").get<double>();
    }

    out.summary_csv += run.name;
    out.summary_csv += ",";
    if (first_src && last_src) out.summary_csv += detail::fmt_double(*last_src - *first_src);
    out.summary_csv += ",";
    if (last_src) out.summary_csv += detail::fmt_double(*last_src);
    out.summary_csv += ",";
    if (last_tgt) out.summary_csv += detail::fmt_double(*last_tgt);
    for (const auto& key : probe_keys) {
      out.summary_csv += ",";
      if (probe_at_full.count(key)) out.summary_csv += detail::fmt_double(probe_at_full.at(key));
    }
    out.summary_csv += "\n";
  }
  return out;
}

inline void write_report(const ExperimentConfig& exp, const ReportResult& report) {
  const auto dir = exp.output_dir / "report";
  std::filesystem::create_directories(dir);
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
    require(out.good(), "cannot write report file: " + (dir / name).string());
    out << content;
  };
  write("loss_curves.csv", report.loss_curves_csv);
  write("summary.csv", report.summary_csv);
  write("probe_sweep.csv", report.probe_sweep_csv);
}

}  // namespace cltune
