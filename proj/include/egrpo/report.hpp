#pragma once

// Read-only summaries of run directories: a CSV table and SVG line charts.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "egrpo/harness.hpp"

namespace egrpo {

struct RunSummary {
  std::filesystem::path dir;
  std::string name;  // path relative to the scanned root
  std::size_t steps = 0;
  std::size_t switch_step = 0;
  std::optional<double> final_acc;
  double mean_l_total = 0.0;
  double mean_reward = 0.0;
  double mean_h_token = 0.0;
  std::optional<EntropyCurveStats> curve;
  std::vector<MetricsRecord> metrics;
};

// Every directory under `root` (including root) holding a metrics.jsonl.
std::vector<std::filesystem::path> find_runs(const std::filesystem::path& root);

// Switch step from result.json, falling back to resolved-config.json.
RunSummary summarize_run(const std::filesystem::path& dir, const std::filesystem::path& root);

std::string report_csv_header();
std::string report_csv_line(const RunSummary& run);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

// Plain SVG line chart; a dashed vertical line marks `marker_x` when given.
std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series, std::optional<double> marker_x);

struct ReportOutcome {
  std::vector<std::filesystem::path> written;
  std::vector<std::string> errors;  // one per unreadable run
};

// csv: writes out_dir/report.csv. svg: writes <name>-entropy.svg and
// <name>-accuracy.svg per run into out_dir. Runs that fail to load are listed
// in the outcome and skipped.
ReportOutcome write_report(const std::filesystem::path& runs_root, const std::string& format,
                           const std::filesystem::path& out_dir);

}  // namespace egrpo
