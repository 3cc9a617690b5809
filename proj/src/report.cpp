#include "egrpo/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace egrpo {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::vector<fs::path> find_runs(const fs::path& root) {
  std::vector<fs::path> out;
  if (!fs::is_directory(root)) throw std::runtime_error("not a directory: " + root.string());
  if (fs::exists(root / "metrics.jsonl")) out.push_back(root);
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "metrics.jsonl")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

std::optional<json> read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) return std::nullopt;
  return json::parse(in);
}

std::string run_name(const fs::path& dir, const fs::path& root) {
  auto rel = fs::relative(dir, root).generic_string();
  if (rel.empty() || rel == ".") rel = fs::absolute(dir).lexically_normal().filename().generic_string();
  if (rel.empty()) rel = "run";
  return rel;
}

std::string num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string opt_num(const std::optional<double>& x) { return x ? num(*x) : ""; }

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

RunSummary summarize_run(const fs::path& dir, const fs::path& root) {
  RunSummary s;
  s.dir = dir;
  s.name = run_name(dir, root);
  s.metrics = read_metrics(dir / "metrics.jsonl");
  s.steps = s.metrics.size();

  const auto result = read_json(dir / "result.json");
  if (result && result->contains("switch_step")) {
    s.switch_step = result->at("switch_step").get<std::size_t>();
  } else if (const auto cfg = read_json(dir / "resolved-config.json")) {
    s.switch_step = cfg->at("schedule").at("switch_step").get<std::size_t>();
  }
  if (result && result->contains("final_acc")) s.final_acc = result->at("final_acc").get<double>();

  if (!s.metrics.empty()) {
    double lt = 0.0, rw = 0.0, h = 0.0;
    for (const auto& m : s.metrics) {
      lt += m.l_total;
      rw += m.reward_mean;
      h += m.h_token;
    }
    const double n = static_cast<double>(s.metrics.size());
    s.mean_l_total = lt / n;
    s.mean_reward = rw / n;
    s.mean_h_token = h / n;
    if (!s.final_acc && s.metrics.back().eval_acc) s.final_acc = s.metrics.back().eval_acc;
    std::vector<double> hs;
    for (const auto& m : s.metrics) hs.push_back(m.h_token);
    try {
      s.curve = entropy_curve_stats(hs, s.switch_step);
    } catch (const std::invalid_argument&) {
    }
  }
  return s;
}

std::string report_csv_header() {
  return "run,steps,switch_step,final_acc,mean_l_total,mean_reward,mean_h_token,early_entropy,pre_switch_entropy,"
         "peak_entropy,final_entropy,pre_over_early,final_over_peak";
}

std::string report_csv_line(const RunSummary& r) {
  std::string line = r.name + "," + std::to_string(r.steps) + "," + std::to_string(r.switch_step) + "," +
                     opt_num(r.final_acc) + "," + num(r.mean_l_total) + "," + num(r.mean_reward) + "," +
                     num(r.mean_h_token);
  if (r.curve) {
    const auto& c = *r.curve;
    for (double x : {c.early_mean, c.pre_switch_mean, c.peak, c.final_mean, c.pre_over_early, c.final_over_peak})
      line += "," + num(x);
  } else {
    line += ",,,,,,";
  }
  return line;
}

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series, std::optional<double> marker_x) {
  const double width = 640, height = 400, left = 60, right = 20, top = 40, bottom = 50;
  const double pw = width - left - right, ph = height - top - bottom;

  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    for (double x : s.x) x0 = std::min(x0, x), x1 = std::max(x1, x);
    for (double y : s.y) y0 = std::min(y0, y), y1 = std::max(y1, y);
  }
  if (marker_x) x0 = std::min(x0, *marker_x), x1 = std::max(x1, *marker_x);
  if (!std::isfinite(x0)) x0 = 0, x1 = 1;
  if (!std::isfinite(y0)) y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  y0 = std::min(y0, 0.0);
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + ph - (y - y0) / (y1 - y0) * ph; };

  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream o;
  o.precision(6);
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
    << xml_escape(title) << "</text>\n";
  o << "<g stroke=\"black\" stroke-width=\"1\">\n"
    << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph << "\"/>\n"
    << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph << "\"/>\n</g>\n";
  o << "<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    o << "<text x=\"" << px(xv) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">" << xv << "</text>\n";
    o << "<text x=\"" << left - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << yv << "</text>\n";
  }
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 10 << "\" text-anchor=\"middle\">" << xml_escape(x_label)
    << "</text>\n";
  o << "<text x=\"14\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " << top + ph / 2
    << ")\">" << xml_escape(y_label) << "</text>\n</g>\n";

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    o << "<polyline class=\"series\" fill=\"none\" stroke=\"" << colors[k % 6] << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) o << (i ? " " : "") << px(s.x[i]) << ',' << py(s.y[i]);
    o << "\"/>\n";
    o << "<text x=\"" << left + pw - 4 << "\" y=\"" << top + 14 + 14 * k << "\" text-anchor=\"end\" fill=\""
      << colors[k % 6] << "\" font-family=\"sans-serif\" font-size=\"11\">" << xml_escape(s.label) << "</text>\n";
  }
  if (marker_x) {
    o << "<line class=\"switch-marker\" x1=\"" << px(*marker_x) << "\" y1=\"" << top << "\" x2=\"" << px(*marker_x)
      << "\" y2=\"" << top + ph << "\" stroke=\"gray\" stroke-dasharray=\"5,4\"/>\n";
    o << "<text x=\"" << px(*marker_x) + 4 << "\" y=\"" << top + 12
      << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"gray\">switch " << *marker_x << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

ReportOutcome write_report(const fs::path& runs_root, const std::string& format, const fs::path& out_dir) {
  if (format != "csv" && format != "svg") throw std::invalid_argument("report: format must be csv or svg");
  ReportOutcome outcome;
  const auto dirs = find_runs(runs_root);
  std::vector<RunSummary> runs;
  for (const auto& d : dirs) {
    try {
      runs.push_back(summarize_run(d, runs_root));
    } catch (const std::exception& e) {
      outcome.errors.push_back(d.string() + ": " + e.what());
    }
  }
  fs::create_directories(out_dir);
  if (format == "csv") {
    const auto path = out_dir / "report.csv";
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << report_csv_header() << '\n';
    for (const auto& r : runs) out << report_csv_line(r) << '\n';
    outcome.written.push_back(path);
    return outcome;
  }
  for (const auto& r : runs) {
    std::string stem = r.name;
    std::replace(stem.begin(), stem.end(), '/', '_');
    const std::optional<double> marker =
        r.switch_step > 0 ? std::optional<double>(static_cast<double>(r.switch_step)) : std::nullopt;
    Series h{"H_token", {}, {}}, acc{"eval accuracy", {}, {}};
    for (const auto& m : r.metrics) {
      h.x.push_back(static_cast<double>(m.step));
      h.y.push_back(m.h_token);
      if (m.eval_acc) {
        acc.x.push_back(static_cast<double>(m.step));
        acc.y.push_back(*m.eval_acc);
      }
    }
    const std::pair<std::string, std::string> charts[] = {
        {"-entropy.svg", line_chart_svg(r.name + ": token entropy", "step", "mean H_token", {h}, marker)},
        {"-accuracy.svg", line_chart_svg(r.name + ": accuracy", "step", "accuracy", {acc}, marker)}};
    for (const auto& [suffix, svg] : charts) {
      const auto path = out_dir / (stem + suffix);
      std::ofstream out(path);
      if (!out) throw std::runtime_error("cannot write " + path.string());
      out << svg;
      outcome.written.push_back(path);
    }
  }
  return outcome;
}

}  // namespace egrpo
