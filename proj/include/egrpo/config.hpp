#pragma once

// Training configuration and its strict JSON schema.
//
// Every section is optional and falls back to the defaults below; unknown keys
// anywhere in the document are rejected together in a single ConfigError.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "egrpo/grpo.hpp"
#include "egrpo/policy.hpp"
#include "egrpo/tasks.hpp"

namespace egrpo {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, std::vector<std::string> keys = {})
      : std::runtime_error(what), keys_(std::move(keys)) {}
  // Dotted paths of the offending keys, when the error is about keys.
  const std::vector<std::string>& keys() const { return keys_; }

 private:
  std::vector<std::string> keys_;
};

enum class RewardSource { kVerifier, kRandom, kFormat, kMajorityVote };

std::string to_string(RewardSource source);
RewardSource reward_source_from_string(const std::string& s);

struct DatasetSpec {
  std::size_t size = 256;
  double noise_rate = 0.0;
  std::uint64_t seed = 1;
};

struct EvalSpec {
  std::size_t size = 200;
  std::uint64_t seed = 2;
  // Evaluate every `every` steps; 0 evaluates only at the end of the run.
  std::size_t every = 25;
};

// Supervised warm start on clean data, producing the "base" policy that RL
// fine-tunes. steps = 0 starts RL from the random initialization.
struct PretrainSpec {
  std::size_t steps = 0;
  std::size_t batch_size = 16;
  double lr = 1e-2;
  std::size_t dataset_size = 256;
  std::uint64_t seed = 3;
};

struct TrainConfig {
  TaskParams task;
  DatasetSpec dataset;
  EvalSpec eval;
  PolicyConfig policy;  // vocab_size is derived from the task
  PretrainSpec pretrain;
  EntropySchedule schedule;  // total_steps mirrors `steps`
  AdamWConfig optimizer;
  std::size_t steps = 1000;
  std::size_t group_size = 8;
  std::size_t grad_accum = 2;
  double clip_eps = 0.2;
  RewardSource reward = RewardSource::kVerifier;
  std::uint64_t seed = 0;
  // Periodic checkpoints in addition to the final one; 0 disables them.
  std::size_t checkpoint_every = 0;
};

void validate(const TrainConfig& config);

// Parses and validates. A missing schedule.switch_step defaults to round(0.8 * steps).
TrainConfig config_from_json(const nlohmann::ordered_json& j);
TrainConfig load_config(const std::filesystem::path& path);

// Fully resolved form, every field explicit.
nlohmann::ordered_json to_json(const TrainConfig& config);

// Label used in result tables: the reward source for spurious-reward
// baselines, "grpo" for schedule mode off, otherwise the schedule mode.
std::string method_label(const TrainConfig& config);

}  // namespace egrpo
