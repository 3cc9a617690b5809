#pragma once

// End-to-end training loop, evaluation, entropy-curve statistics and sweeps.
//
// One training step consumes `grad_accum` prompts. For each prompt the current
// policy samples `group_size` responses (the old policy of that step), rewards
// are turned into group-relative advantages, and the per-group losses
// L_GRPO + lambda_g * L_entropy are averaged over the prompts before a single
// AdamW update.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "egrpo/config.hpp"
#include "egrpo/grpo.hpp"
#include "egrpo/policy.hpp"
#include "egrpo/tasks.hpp"

namespace egrpo {

struct GroupRecord {
  std::size_t sample_id = 0;
  bool is_noisy = false;
  double lambda = 0.0;
  double l_grpo = 0.0;
  double l_entropy = 0.0;
  double reward_mean = 0.0;
};

struct MetricsRecord {
  std::size_t step = 0;
  double l_total = 0.0;
  double l_grpo = 0.0;     // mean over the step's groups
  double l_entropy = 0.0;  // mean over the step's groups
  // Coefficient of the step. For per-subset modes, where groups carry
  // different coefficients, this is the entropy-weighted mean
  // sum_g lambda_g L_ent_g / sum_g L_ent_g, so that
  // l_total == l_grpo + lambda * l_entropy holds for every record.
  double lambda = 0.0;
  double h_token = 0.0;      // mean sequence entropy of the sampled responses
  double reward_mean = 0.0;
  double lr = 0.0;
  std::optional<double> eval_acc;
  std::vector<GroupRecord> groups;
};

nlohmann::ordered_json to_json(const MetricsRecord& r);
MetricsRecord metrics_record_from_json(const nlohmann::ordered_json& j);
std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path);

struct EntropyCurveStats {
  double early_mean = 0.0;       // first 5% of steps
  double pre_switch_mean = 0.0;  // last 10% of steps up to and including the switch
  double peak = 0.0;             // max trailing 5%-window mean over steps <= switch
  double final_mean = 0.0;       // last 5% of steps
  double pre_over_early = 0.0;
  double final_over_peak = 0.0;
};

// `h` holds one value per step, h[0] being step 1.
EntropyCurveStats entropy_curve_stats(std::span<const double> h, std::size_t switch_step);
nlohmann::ordered_json to_json(const EntropyCurveStats& s);

// Replaces the reward of a rollout; used to build degenerate tasks in tests.
using RewardOverride = std::function<double(const Sample&, const Trajectory&)>;

struct TrainOptions {
  RewardOverride reward_override;
  // Skip the final and periodic checkpoint files (metrics are still written).
  bool write_checkpoints = true;
};

struct TrainResult {
  std::filesystem::path run_dir;
  std::size_t switch_step = 0;  // effective switch (earlier when saturation fired)
  double initial_acc = 0.0;     // base policy, before any RL step
  double final_acc = 0.0;
  std::optional<EntropyCurveStats> curve;
  PolicyParams initial_params;
  PolicyParams final_params;
  std::vector<MetricsRecord> metrics;
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, std::size_t last_good_step)
      : std::runtime_error(what), last_good_step_(last_good_step) {}
  std::size_t last_good_step() const { return last_good_step_; }

 private:
  std::size_t last_good_step_;
};

// Builds the base policy: random init (keyed on the config seed) followed by
// the optional supervised warm start.
PolicyParams base_policy(const TrainConfig& config);

// Writes resolved-config.json, metrics.jsonl, checkpoints/step-<n>.json and
// result.json under run_dir. Throws TrainingAborted on a non-finite loss after
// saving the last good parameters.
TrainResult train(const TrainConfig& config, const std::filesystem::path& run_dir, const TrainOptions& options = {});

using Responder = std::function<std::vector<Token>(const Sample&)>;

// Mean verifier reward of the responses against the true targets.
double evaluate(const Dataset& eval_set, const Responder& respond);
// Greedy decoding; throws when the policy vocabulary does not fit the task.
double evaluate(const PolicyParams& params, const Dataset& eval_set);
// Also rejects a checkpoint whose recorded task differs from the dataset's.
double evaluate_checkpoint(const std::filesystem::path& checkpoint, const Dataset& eval_set);

// The held-out evaluation set of a config (clean targets).
Dataset eval_dataset(const TrainConfig& config);

struct SweepCell {
  std::string id;
  nlohmann::ordered_json delta;  // JSON merge patch applied to the base config
};

struct SweepSpec {
  nlohmann::ordered_json base;
  std::vector<SweepCell> cells;
  std::vector<std::uint64_t> seeds;
};

SweepSpec sweep_spec_from_json(const nlohmann::ordered_json& j);

struct SweepRow {
  std::string config_id;
  std::uint64_t seed = 0;
  double noise_rate = 0.0;
  std::string method;
  std::size_t switch_step = 0;
  double final_acc = 0.0;
  double early_entropy = 0.0;
  double peak_entropy = 0.0;
  double final_entropy = 0.0;
  std::optional<std::string> error;
};

// Runs every cell x seed into out_dir/<id>/seed-<s>, at most `jobs` at a time,
// and writes results.csv (successful rows), summary.csv (mean/std per cell)
// and failures.csv. Failed cells do not stop the sweep.
std::vector<SweepRow> sweep(const SweepSpec& spec, const std::filesystem::path& out_dir, std::size_t jobs = 1);

std::string results_csv_header();
std::string results_csv_line(const SweepRow& row);

}  // namespace egrpo
