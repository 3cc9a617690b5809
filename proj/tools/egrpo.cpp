// egrpo: datasets, training, evaluation, sweeps and reports from the command line.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "egrpo/config.hpp"
#include "egrpo/harness.hpp"
#include "egrpo/report.hpp"
#include "egrpo/tasks.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace egrpo;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path out_root() {
  const char* env = std::getenv("EGRPO_OUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError(path.string() + ": invalid JSON: " + e.what());
  }
}

TrainConfig config_with_seed(const fs::path& path, std::optional<std::uint64_t> seed) {
  json j = read_json_file(path);
  if (seed) j["seed"] = *seed;
  return config_from_json(j);
}

fs::path default_out(const fs::path& config, const std::string& suffix) {
  return out_root() / (config.stem().string() + suffix);
}

struct MakeDataArgs {
  std::string task = "grid-ground";
  std::size_t size = 0;
  double noise = 0.0;
  std::uint64_t seed = 0;
  std::string out;
  TaskParams params;
};

int run_make_data(MakeDataArgs& a) {
  if (a.size == 0) throw UsageError("make-data: --size must be positive");
  if (!(a.noise >= 0.0 && a.noise <= 1.0)) throw UsageError("make-data: --noise must lie in [0, 1]");
  a.params.kind = task_kind_from_string(a.task);
  try {
    validate(a.params);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("make-data: ") + e.what());
  }
  const Dataset ds = make_dataset(a.params, a.size, a.noise, a.seed);
  write_dataset(a.out, ds);
  std::cout << ds.size() << " samples, " << ds.noisy_count() << " noisy\n";
  return 0;
}

struct RunArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int run_train(const RunArgs& a) {
  const TrainConfig cfg = config_with_seed(a.config, a.seed);
  const fs::path out = a.out.empty() ? default_out(a.config, "-seed" + std::to_string(cfg.seed)) : fs::path(a.out);
  const auto r = train(cfg, out);
  std::cout << "trained " << cfg.steps << " steps into " << out.string() << ": initial accuracy " << r.initial_acc
            << ", final accuracy " << r.final_acc << ", switch step " << r.switch_step << '\n';
  return 0;
}

struct EvalArgs {
  RunArgs run;
  std::string checkpoint;
  std::string dataset;
};

int run_eval(const EvalArgs& a) {
  if (a.run.config.empty() && a.dataset.empty()) throw UsageError("eval: give --config or --dataset");
  Dataset ds;
  if (!a.dataset.empty()) {
    ds = read_dataset(a.dataset);
  } else {
    ds = eval_dataset(config_with_seed(a.run.config, a.run.seed));
  }
  const double acc = evaluate_checkpoint(a.checkpoint, ds);
  std::cout << "accuracy " << acc << " over " << ds.size() << " prompts\n";
  if (!a.run.out.empty()) {
    fs::create_directories(a.run.out);
    std::ofstream out(fs::path(a.run.out) / "eval.json");
    out << json{{"checkpoint", a.checkpoint}, {"prompts", ds.size()}, {"accuracy", acc}}.dump(2) << '\n';
  }
  return 0;
}

int run_sweep(const RunArgs& a, std::size_t jobs) {
  json j = read_json_file(a.config);
  if (a.seed) j["seeds"] = json::array({*a.seed});
  const SweepSpec spec = sweep_spec_from_json(j);
  const fs::path out = a.out.empty() ? default_out(a.config, "") : fs::path(a.out);
  const auto rows = sweep(spec, out, jobs);
  std::size_t failed = 0;
  for (const auto& r : rows) {
    if (r.error) {
      ++failed;
      std::cerr << "cell " << r.config_id << " seed " << r.seed << " failed: " << *r.error << '\n';
    }
  }
  std::cout << rows.size() - failed << " of " << rows.size() << " runs succeeded; results in "
            << (out / "results.csv").string() << '\n';
  return failed ? kRuntime : 0;
}

int run_report(const std::string& runs, const std::string& format, std::string out) {
  if (out.empty()) out = "report";
  const auto outcome = write_report(runs, format, out);
  for (const auto& e : outcome.errors) std::cerr << "skipped " << e << '\n';
  std::cout << "wrote " << outcome.written.size() << " file(s) to " << out << '\n';
  return outcome.errors.empty() ? 0 : kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Entropy-scheduled GRPO experiments on synthetic verifiable tasks"};
  app.require_subcommand(1);

  MakeDataArgs md;
  auto* make = app.add_subcommand("make-data", "Write a JSONL dataset with synthetic label noise");
  make->add_option("--task", md.task, "grid-ground or classify")->check(CLI::IsMember({"grid-ground", "classify"}));
  make->add_option("--size", md.size, "Number of samples")->required();
  make->add_option("--noise", md.noise, "Fraction of corrupted training targets")->default_val(0.0);
  make->add_option("--seed", md.seed, "Dataset seed")->default_val(0);
  make->add_option("--out", md.out, "Output JSONL path")->required();
  make->add_option("--grid-rows", md.params.grid_rows)->default_val(md.params.grid_rows);
  make->add_option("--grid-cols", md.params.grid_cols)->default_val(md.params.grid_cols);
  make->add_option("--box-rows", md.params.box_rows)->default_val(md.params.box_rows);
  make->add_option("--box-cols", md.params.box_cols)->default_val(md.params.box_cols);
  make->add_option("--num-labels", md.params.num_labels)->default_val(md.params.num_labels);
  make->add_option("--num-features", md.params.num_features)->default_val(md.params.num_features);
  make->add_option("--features-per-prompt", md.params.features_per_prompt)->default_val(md.params.features_per_prompt);
  make->add_option("--feature-noise", md.params.feature_noise)->default_val(md.params.feature_noise);
  make->add_option("--prototype-seed", md.params.prototype_seed)->default_val(md.params.prototype_seed);

  RunArgs tr;
  auto* trainc = app.add_subcommand("train", "Run one training job");
  trainc->add_option("--config", tr.config, "Training config (JSON)")->required();
  trainc->add_option("--out", tr.out, "Run directory (default $EGRPO_OUT_ROOT/<config>-seed<n>)");
  trainc->add_option("--seed", tr.seed, "Override the global seed");

  EvalArgs ev;
  auto* evalc = app.add_subcommand("eval", "Greedy accuracy of a checkpoint against true targets");
  evalc->add_option("--checkpoint", ev.checkpoint, "Checkpoint JSON")->required();
  evalc->add_option("--config", ev.run.config, "Use this config's evaluation set");
  evalc->add_option("--dataset", ev.dataset, "Use a JSONL dataset instead");
  evalc->add_option("--out", ev.run.out, "Directory for eval.json");
  evalc->add_option("--seed", ev.run.seed, "Override the config's global seed");

  RunArgs sw;
  std::size_t jobs = 1;
  auto* sweepc = app.add_subcommand("sweep", "Run a grid of config deltas over seeds");
  sweepc->add_option("--config", sw.config, "Sweep spec (JSON: base, cells, seeds)")->required();
  sweepc->add_option("--out", sw.out, "Sweep directory (default $EGRPO_OUT_ROOT/<spec name>)");
  sweepc->add_option("--seed", sw.seed, "Run only this seed");
  sweepc->add_option("--jobs", jobs, "Parallel workers")->default_val(1)->check(CLI::PositiveNumber);

  std::string runs, format = "csv", report_out;
  auto* reportc = app.add_subcommand("report", "Summarize run directories as CSV or SVG charts");
  reportc->add_option("--runs", runs, "Directory containing runs")->required();
  reportc->add_option("--format", format, "csv or svg")->check(CLI::IsMember({"csv", "svg"}));
  reportc->add_option("--out", report_out, "Output directory (default ./report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "egrpo: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (*make) return run_make_data(md);
    if (*trainc) return run_train(tr);
    if (*evalc) return run_eval(ev);
    if (*sweepc) return run_sweep(sw, jobs);
    if (*reportc) return run_report(runs, format, report_out);
  } catch (const UsageError& e) {
    std::cerr << "egrpo: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "egrpo: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "egrpo: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
