#include "egrpo/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace egrpo {

using json = nlohmann::ordered_json;

std::string to_string(RewardSource source) {
  switch (source) {
    case RewardSource::kVerifier: return "verifier";
    case RewardSource::kRandom: return "random";
    case RewardSource::kFormat: return "format";
    case RewardSource::kMajorityVote: return "majority-vote";
  }
  return "?";
}

RewardSource reward_source_from_string(const std::string& s) {
  for (auto r : {RewardSource::kVerifier, RewardSource::kRandom, RewardSource::kFormat, RewardSource::kMajorityVote})
    if (to_string(r) == s) return r;
  throw ConfigError("unknown reward source '" + s + "'");
}

namespace {

const std::set<std::string> kTopKeys = {"task",  "dataset",    "eval",       "policy",   "pretrain",
                                        "schedule", "optimizer", "steps",     "group_size", "grad_accum",
                                        "clip_eps", "reward",    "seed",      "checkpoint_every"};
const std::set<std::string> kTaskKeys = {"kind",      "grid_rows",    "grid_cols",           "box_rows",
                                         "box_cols",  "num_labels",   "num_features",        "features_per_prompt",
                                         "feature_noise", "prototype_seed"};
const std::set<std::string> kDatasetKeys = {"size", "noise_rate", "seed"};
const std::set<std::string> kEvalKeys = {"size", "seed", "every"};
const std::set<std::string> kPolicyKeys = {"context_window", "embed_dim", "hidden_dim", "layers", "embed_init", "head_init"};
const std::set<std::string> kPretrainKeys = {"steps", "batch_size", "lr", "dataset_size", "seed"};
const std::set<std::string> kScheduleKeys = {"mode", "lambda_max", "lambda_min", "switch_step", "saturation"};
const std::set<std::string> kSaturationKeys = {"window", "tolerance"};
const std::set<std::string> kOptimizerKeys = {"lr", "beta1", "beta2", "eps", "weight_decay", "decay_steps"};

void collect_unknown(const json& j, const std::set<std::string>& allowed, const std::string& prefix,
                     std::vector<std::string>& out) {
  if (!j.is_object()) return;
  for (const auto& [k, v] : j.items())
    if (!allowed.contains(k)) out.push_back(prefix + k);
}

std::vector<std::string> unknown_keys(const json& j) {
  std::vector<std::string> out;
  collect_unknown(j, kTopKeys, "", out);
  auto section = [&](const char* name, const std::set<std::string>& keys) {
    if (j.contains(name)) collect_unknown(j.at(name), keys, std::string(name) + ".", out);
  };
  section("task", kTaskKeys);
  section("dataset", kDatasetKeys);
  section("eval", kEvalKeys);
  section("policy", kPolicyKeys);
  section("pretrain", kPretrainKeys);
  section("schedule", kScheduleKeys);
  section("optimizer", kOptimizerKeys);
  if (j.contains("schedule") && j.at("schedule").is_object() && j.at("schedule").contains("saturation"))
    collect_unknown(j.at("schedule").at("saturation"), kSaturationKeys, "schedule.saturation.", out);
  return out;
}

template <typename T>
void read(const json& j, const char* key, T& dst, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + key + ": wrong type", {where + key});
  }
}

const json& section_or_empty(const json& j, const char* name) {
  static const json empty = json::object();
  if (!j.contains(name)) return empty;
  if (!j.at(name).is_object()) throw ConfigError(std::string(name) + ": expected an object", {name});
  return j.at(name);
}

}  // namespace

void validate(const TrainConfig& c) {
  validate(c.task);
  validate(c.policy);
  validate(c.schedule);
  if (c.schedule.total_steps != c.steps) throw ConfigError("schedule.total_steps must equal steps");
  if (c.dataset.size == 0) throw ConfigError("dataset.size must be positive");
  if (!(c.dataset.noise_rate >= 0.0 && c.dataset.noise_rate <= 1.0)) throw ConfigError("dataset.noise_rate must lie in [0, 1]");
  if (c.eval.size == 0) throw ConfigError("eval.size must be positive");
  if (c.group_size < 2) throw ConfigError("group_size must be at least 2");
  if (c.grad_accum == 0) throw ConfigError("grad_accum must be positive");
  if (!(c.clip_eps > 0.0 && c.clip_eps < 1.0)) throw ConfigError("clip_eps must lie in (0, 1)");
  if (!(c.optimizer.lr >= 0.0) || !(c.optimizer.beta1 >= 0.0 && c.optimizer.beta1 < 1.0) ||
      !(c.optimizer.beta2 >= 0.0 && c.optimizer.beta2 < 1.0) || !(c.optimizer.eps > 0.0) ||
      !(c.optimizer.weight_decay >= 0.0))
    throw ConfigError("optimizer: invalid hyperparameters");
  if (c.pretrain.steps > 0 && (c.pretrain.batch_size == 0 || c.pretrain.dataset_size == 0 || !(c.pretrain.lr > 0.0)))
    throw ConfigError("pretrain: batch_size, dataset_size and lr must be positive");
  if (is_per_subset(c.schedule.mode) && c.reward != RewardSource::kVerifier)
    throw ConfigError("per-subset schedule modes need the verifier reward");
}

TrainConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (auto bad = unknown_keys(j); !bad.empty()) {
    std::string msg = "unknown config key";
    msg += bad.size() > 1 ? "s: " : ": ";
    for (std::size_t i = 0; i < bad.size(); ++i) msg += (i ? ", " : "") + bad[i];
    throw ConfigError(msg, bad);
  }

  TrainConfig c;
  read(j, "steps", c.steps, "");
  read(j, "group_size", c.group_size, "");
  read(j, "grad_accum", c.grad_accum, "");
  read(j, "clip_eps", c.clip_eps, "");
  read(j, "seed", c.seed, "");
  read(j, "checkpoint_every", c.checkpoint_every, "");
  if (j.contains("reward")) {
    std::string r;
    read(j, "reward", r, "");
    c.reward = reward_source_from_string(r);
  }

  const json& task = section_or_empty(j, "task");
  if (!task.empty()) {
    try {
      json t = task;
      if (!t.contains("kind")) t["kind"] = to_string(c.task.kind);
      c.task = task_params_from_json(t);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("task: ") + e.what(), {"task"});
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("task: ") + e.what(), {"task"});
    }
  }

  const json& ds = section_or_empty(j, "dataset");
  read(ds, "size", c.dataset.size, "dataset.");
  read(ds, "noise_rate", c.dataset.noise_rate, "dataset.");
  read(ds, "seed", c.dataset.seed, "dataset.");

  const json& ev = section_or_empty(j, "eval");
  read(ev, "size", c.eval.size, "eval.");
  read(ev, "seed", c.eval.seed, "eval.");
  read(ev, "every", c.eval.every, "eval.");

  const json& pol = section_or_empty(j, "policy");
  read(pol, "context_window", c.policy.context_window, "policy.");
  read(pol, "embed_dim", c.policy.embed_dim, "policy.");
  read(pol, "hidden_dim", c.policy.hidden_dim, "policy.");
  read(pol, "layers", c.policy.layers, "policy.");
  read(pol, "embed_init", c.policy.embed_init, "policy.");
  read(pol, "head_init", c.policy.head_init, "policy.");
  c.policy.vocab_size = vocab_size(c.task);

  const json& pre = section_or_empty(j, "pretrain");
  read(pre, "steps", c.pretrain.steps, "pretrain.");
  read(pre, "batch_size", c.pretrain.batch_size, "pretrain.");
  read(pre, "lr", c.pretrain.lr, "pretrain.");
  read(pre, "dataset_size", c.pretrain.dataset_size, "pretrain.");
  read(pre, "seed", c.pretrain.seed, "pretrain.");

  const json& sch = section_or_empty(j, "schedule");
  if (sch.contains("mode")) {
    std::string m;
    read(sch, "mode", m, "schedule.");
    try {
      c.schedule.mode = schedule_mode_from_string(m);
    } catch (const std::invalid_argument&) {
      throw ConfigError("schedule.mode: unknown mode '" + m + "'", {"schedule.mode"});
    }
  }
  read(sch, "lambda_max", c.schedule.lambda_max, "schedule.");
  read(sch, "lambda_min", c.schedule.lambda_min, "schedule.");
  c.schedule.total_steps = c.steps;
  c.schedule.switch_step = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(c.steps)));
  read(sch, "switch_step", c.schedule.switch_step, "schedule.");
  if (sch.contains("saturation") && !sch.at("saturation").is_null()) {
    const json& sat = sch.at("saturation");
    if (!sat.is_object()) throw ConfigError("schedule.saturation: expected an object or null", {"schedule.saturation"});
    SaturationTrigger t;
    read(sat, "window", t.window, "schedule.saturation.");
    read(sat, "tolerance", t.tolerance, "schedule.saturation.");
    c.schedule.saturation = t;
  }

  const json& opt = section_or_empty(j, "optimizer");
  read(opt, "lr", c.optimizer.lr, "optimizer.");
  read(opt, "beta1", c.optimizer.beta1, "optimizer.");
  read(opt, "beta2", c.optimizer.beta2, "optimizer.");
  read(opt, "eps", c.optimizer.eps, "optimizer.");
  read(opt, "weight_decay", c.optimizer.weight_decay, "optimizer.");
  read(opt, "decay_steps", c.optimizer.decay_steps, "optimizer.");

  // E = 0 is a legal (empty) run; the schedule itself needs a step range.
  if (c.steps > 0) {
    try {
      validate(c);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  } else {
    validate(c.task);
    validate(c.policy);
  }
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

json to_json(const TrainConfig& c) {
  json j;
  j["task"] = to_json(c.task);
  j["dataset"] = {{"size", c.dataset.size}, {"noise_rate", c.dataset.noise_rate}, {"seed", c.dataset.seed}};
  j["eval"] = {{"size", c.eval.size}, {"seed", c.eval.seed}, {"every", c.eval.every}};
  j["policy"] = {{"context_window", c.policy.context_window}, {"embed_dim", c.policy.embed_dim},
                 {"hidden_dim", c.policy.hidden_dim},         {"layers", c.policy.layers},
                 {"embed_init", c.policy.embed_init},         {"head_init", c.policy.head_init}};
  j["pretrain"] = {{"steps", c.pretrain.steps},
                   {"batch_size", c.pretrain.batch_size},
                   {"lr", c.pretrain.lr},
                   {"dataset_size", c.pretrain.dataset_size},
                   {"seed", c.pretrain.seed}};
  json sch = {{"mode", to_string(c.schedule.mode)},
              {"lambda_max", c.schedule.lambda_max},
              {"lambda_min", c.schedule.lambda_min},
              {"switch_step", c.schedule.switch_step}};
  if (c.schedule.saturation)
    sch["saturation"] = {{"window", c.schedule.saturation->window}, {"tolerance", c.schedule.saturation->tolerance}};
  else
    sch["saturation"] = nullptr;
  j["schedule"] = std::move(sch);
  j["optimizer"] = {{"lr", c.optimizer.lr},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"eps", c.optimizer.eps},
                    {"weight_decay", c.optimizer.weight_decay},
                    {"decay_steps", c.optimizer.decay_steps}};
  j["steps"] = c.steps;
  j["group_size"] = c.group_size;
  j["grad_accum"] = c.grad_accum;
  j["clip_eps"] = c.clip_eps;
  j["reward"] = to_string(c.reward);
  j["seed"] = c.seed;
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

std::string method_label(const TrainConfig& c) {
  if (c.reward != RewardSource::kVerifier) return to_string(c.reward) + "-reward";
  if (c.schedule.mode == ScheduleMode::kOff) return "grpo";
  return to_string(c.schedule.mode);
}

}  // namespace egrpo
