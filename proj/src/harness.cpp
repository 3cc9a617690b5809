#include "egrpo/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include "egrpo/rng.hpp"

namespace egrpo {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

json to_json(const MetricsRecord& r) {
  json j;
  j["step"] = r.step;
  j["l_total"] = r.l_total;
  j["l_grpo"] = r.l_grpo;
  j["l_entropy"] = r.l_entropy;
  j["lambda"] = r.lambda;
  j["h_token"] = r.h_token;
  j["reward_mean"] = r.reward_mean;
  j["lr"] = r.lr;
  j["eval_acc"] = r.eval_acc ? json(*r.eval_acc) : json(nullptr);
  auto groups = json::array();
  for (const auto& g : r.groups) {
    groups.push_back({{"sample_id", g.sample_id},
                      {"is_noisy", g.is_noisy},
                      {"lambda", g.lambda},
                      {"l_grpo", g.l_grpo},
                      {"l_entropy", g.l_entropy},
                      {"reward_mean", g.reward_mean}});
  }
  j["groups"] = std::move(groups);
  return j;
}

MetricsRecord metrics_record_from_json(const json& j) {
  MetricsRecord r;
  r.step = j.at("step").get<std::size_t>();
  r.l_total = j.at("l_total").get<double>();
  r.l_grpo = j.at("l_grpo").get<double>();
  r.l_entropy = j.at("l_entropy").get<double>();
  r.lambda = j.at("lambda").get<double>();
  r.h_token = j.at("h_token").get<double>();
  r.reward_mean = j.at("reward_mean").get<double>();
  r.lr = j.at("lr").get<double>();
  if (j.contains("eval_acc") && !j.at("eval_acc").is_null()) r.eval_acc = j.at("eval_acc").get<double>();
  if (j.contains("groups")) {
    for (const auto& g : j.at("groups")) {
      r.groups.push_back({g.at("sample_id").get<std::size_t>(), g.at("is_noisy").get<bool>(),
                          g.at("lambda").get<double>(), g.at("l_grpo").get<double>(),
                          g.at("l_entropy").get<double>(), g.at("reward_mean").get<double>()});
    }
  }
  return r;
}

std::vector<MetricsRecord> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read metrics " + path.string());
  std::vector<MetricsRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(metrics_record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (out.size() > 1 && out.back().step <= out[out.size() - 2].step)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": step indices not increasing");
  }
  return out;
}

namespace {

double window_mean(std::span<const double> h, std::size_t begin, std::size_t end) {
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += h[i];
  return s / static_cast<double>(end - begin);
}

std::size_t fraction_of(std::size_t n, double f) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(f * static_cast<double>(n))));
}

}  // namespace

EntropyCurveStats entropy_curve_stats(std::span<const double> h, std::size_t switch_step) {
  const std::size_t n = h.size();
  if (n == 0) throw std::invalid_argument("entropy_curve_stats: empty stream");
  if (switch_step == 0 || switch_step > n)
    throw std::invalid_argument("entropy_curve_stats: switch step outside the stream");
  const std::size_t w5 = fraction_of(n, 0.05), w10 = fraction_of(n, 0.10);
  if (switch_step < w10 || switch_step < w5)
    throw std::invalid_argument("entropy_curve_stats: too few steps before the switch for the windows");

  EntropyCurveStats s;
  s.early_mean = window_mean(h, 0, w5);
  s.pre_switch_mean = window_mean(h, switch_step - w10, switch_step);
  s.peak = -INFINITY;
  for (std::size_t end = w5; end <= switch_step; ++end) s.peak = std::max(s.peak, window_mean(h, end - w5, end));
  s.final_mean = window_mean(h, n - w5, n);
  s.pre_over_early = s.pre_switch_mean / s.early_mean;
  s.final_over_peak = s.final_mean / s.peak;
  return s;
}

json to_json(const EntropyCurveStats& s) {
  return {{"early_mean", s.early_mean},         {"pre_switch_mean", s.pre_switch_mean},
          {"peak", s.peak},                     {"final_mean", s.final_mean},
          {"pre_over_early", s.pre_over_early}, {"final_over_peak", s.final_over_peak}};
}

namespace {

// Supervised answer tokens for a clean sample: the box centre or the label.
std::vector<Token> reference_tokens(const TaskParams& task, const Target& t) {
  if (const auto* b = std::get_if<Box>(&t))
    return encode_answer(task, Point{(b->top + b->bottom) / 2, (b->left + b->right) / 2});
  return encode_answer(task, std::get<Label>(t));
}

void pretrain(PolicyParams& params, const TrainConfig& c) {
  const auto& spec = c.pretrain;
  const Dataset data = make_dataset(c.task, spec.dataset_size, 0.0, spec.seed);
  std::vector<std::vector<Token>> targets;
  for (const auto& s : data.samples) targets.push_back(reference_tokens(c.task, s.true_target));

  AdamWConfig opt;
  opt.lr = spec.lr;
  auto state = OptimizerState::like(params, opt);
  for (std::size_t step = 1; step <= spec.steps; ++step) {
    auto rng = RngStream::keyed(RngPurpose::kPretrain, {spec.seed, step});
    Tape tape;
    PolicyGraph graph(tape, params);
    std::vector<Value> terms;
    for (std::size_t b = 0; b < spec.batch_size; ++b) {
      const std::size_t i = rng.below(data.size());
      for (const auto& st : graph.steps(data.samples[i].prompt, targets[i])) terms.push_back(st.logprob);
    }
    const Value loss = scale(sum(concat(terms)), -1.0 / static_cast<double>(spec.batch_size));
    tape.backward(loss);
    adamw_step(params, graph.gradients(), state);
  }
}

bool is_temporal(ScheduleMode m) { return m == ScheduleMode::kMaxThenMin || m == ScheduleMode::kMinThenMax; }

class PromptOrder {
 public:
  PromptOrder(std::size_t size, std::uint64_t seed) : size_(size), seed_(seed) {}

  // Index of the n-th prompt drawn (0-based), reshuffled every epoch.
  std::size_t at(std::size_t n) {
    const std::size_t epoch = n / size_;
    if (epoch != epoch_ || perm_.empty()) {
      perm_.resize(size_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      auto rng = RngStream::keyed(RngPurpose::kShuffle, {seed_, epoch});
      rng.shuffle(std::span(perm_));
      epoch_ = epoch;
    }
    return perm_[n % size_];
  }

 private:
  std::size_t size_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::vector<std::size_t> perm_;
};

json checkpoint_meta(const TrainConfig& c, std::size_t step) {
  return {{"step", step}, {"seed", c.seed}, {"task", to_json(c.task)}};
}

fs::path checkpoint_path(const fs::path& run_dir, std::size_t step) {
  return run_dir / "checkpoints" / ("step-" + std::to_string(step) + ".json");
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace

PolicyParams base_policy(const TrainConfig& config) {
  PolicyConfig pc = config.policy;
  pc.vocab_size = vocab_size(config.task);
  PolicyParams params = PolicyParams::init(pc, config.seed);
  if (config.pretrain.steps > 0) pretrain(params, config);
  return params;
}

Dataset eval_dataset(const TrainConfig& config) {
  return make_dataset(config.task, config.eval.size, 0.0, config.eval.seed);
}

double evaluate(const Dataset& eval_set, const Responder& respond) {
  if (eval_set.samples.empty()) throw std::invalid_argument("evaluate: empty evaluation set");
  double hits = 0.0;
  for (const auto& s : eval_set.samples) {
    const auto tokens = respond(s);
    hits += verify(parse_answer(eval_set.task, tokens), s.true_target);
  }
  return hits / static_cast<double>(eval_set.size());
}

double evaluate(const PolicyParams& params, const Dataset& eval_set) {
  if (params.config.vocab_size != vocab_size(eval_set.task))
    throw std::invalid_argument("evaluate: policy vocabulary (" + std::to_string(params.config.vocab_size) +
                                ") does not match the " + to_string(eval_set.task.kind) + " task (" +
                                std::to_string(vocab_size(eval_set.task)) + ")");
  const std::size_t len = response_length(eval_set.task);
  return evaluate(eval_set, [&](const Sample& s) { return greedy_response(params, s.prompt, len); });
}

double evaluate_checkpoint(const fs::path& checkpoint, const Dataset& eval_set) {
  const auto [params, meta] = load_checkpoint(checkpoint);
  if (meta.contains("task") && task_params_from_json(meta.at("task")) != eval_set.task)
    throw std::invalid_argument("evaluate: checkpoint was trained on a different task than the dataset");
  return evaluate(params, eval_set);
}

TrainResult train(const TrainConfig& config, const fs::path& run_dir, const TrainOptions& options) {
  if (config.steps > 0) validate(config);
  fs::create_directories(run_dir);
  write_json_file(run_dir / "resolved-config.json", to_json(config));
  std::ofstream metrics_out(run_dir / "metrics.jsonl", std::ios::trunc);
  if (!metrics_out) throw std::runtime_error("cannot write " + (run_dir / "metrics.jsonl").string());

  TrainResult result;
  result.run_dir = run_dir;
  PolicyParams params = base_policy(config);
  result.initial_params = params;

  const TaskParams& task = config.task;
  const Dataset train_set = make_dataset(task, config.dataset.size, config.dataset.noise_rate, config.dataset.seed);
  const Dataset eval_set = eval_dataset(config);
  result.initial_acc = evaluate(params, eval_set);

  const std::size_t max_len = response_length(task);
  EntropySchedule schedule = config.schedule;
  schedule.total_steps = config.steps;
  const bool adaptive = schedule.saturation.has_value() && is_temporal(schedule.mode);
  bool switched = false;

  auto state = OptimizerState::like(params, config.optimizer);
  PromptOrder order(train_set.size(), config.seed);
  std::vector<double> h_history;

  auto save = [&](std::size_t step) {
    if (options.write_checkpoints) save_checkpoint(checkpoint_path(run_dir, step), params, checkpoint_meta(config, step));
  };

  for (std::size_t step = 1; step <= config.steps; ++step) {
    MetricsRecord rec;
    rec.step = step;
    rec.lr = state.lr_at(step);

    std::vector<RolloutGroup> groups;
    std::vector<const Sample*> samples;
    double reward_sum = 0.0, h_sum = 0.0;
    std::size_t rollouts = 0;
    for (std::size_t slot = 0; slot < config.grad_accum; ++slot) {
      const Sample& s = train_set.samples[order.at((step - 1) * config.grad_accum + slot)];
      RolloutGroup g;
      g.sample_id = s.id;
      std::vector<std::optional<Answer>> answers;
      for (std::size_t i = 0; i < config.group_size; ++i) {
        auto rng = RngStream::keyed(RngPurpose::kRollout, {config.seed, step, slot, i});
        Trajectory tr = sample_response(params, s.prompt, max_len, rng);
        tr.answer = parse_answer(task, tr.tokens);
        answers.push_back(tr.answer);
        g.trajectories.push_back(std::move(tr));
      }
      if (config.reward == RewardSource::kMajorityVote) {
        g.rewards = majority_vote_reward(answers);
      } else {
        for (std::size_t i = 0; i < config.group_size; ++i) {
          const Trajectory& tr = g.trajectories[i];
          auto rng = RngStream::keyed(RngPurpose::kReward, {config.seed, step, slot, i});
          switch (config.reward) {
            case RewardSource::kVerifier: g.rewards.push_back(verify(tr.answer, s.train_target)); break;
            case RewardSource::kRandom: g.rewards.push_back(spurious_reward(SpuriousKind::kRandom, tr, rng)); break;
            case RewardSource::kFormat: g.rewards.push_back(spurious_reward(SpuriousKind::kFormat, tr, rng)); break;
            case RewardSource::kMajorityVote: break;
          }
        }
      }
      if (options.reward_override)
        for (std::size_t i = 0; i < config.group_size; ++i) g.rewards[i] = options.reward_override(s, g.trajectories[i]);
      for (std::size_t i = 0; i < config.group_size; ++i) {
        reward_sum += g.rewards[i];
        h_sum += g.trajectories[i].mean_entropy();
        ++rollouts;
      }
      groups.push_back(std::move(g));
      samples.push_back(&s);
    }
    rec.reward_mean = reward_sum / static_cast<double>(rollouts);
    rec.h_token = h_sum / static_cast<double>(rollouts);

    std::vector<Tensor> grads;
    try {
      for (auto& g : groups) g.advantages = group_advantages(g.rewards);
      Tape tape;
      PolicyGraph graph(tape, params);
      std::vector<Value> totals;
      double lambda_weighted = 0.0, lambda_plain = 0.0, ent_sum = 0.0, grpo_sum = 0.0;
      for (std::size_t k = 0; k < groups.size(); ++k) {
        const auto losses = group_losses(graph, groups[k], config.clip_eps);
        const double lambda = is_per_subset(schedule.mode)
                                  ? lambda_schedule(step, schedule, samples[k]->is_noisy)
                                  : lambda_schedule(step, schedule);
        totals.push_back(total_loss(losses.grpo, losses.entropy, lambda));
        GroupRecord gr;
        gr.sample_id = samples[k]->id;
        gr.is_noisy = samples[k]->is_noisy;
        gr.lambda = lambda;
        gr.l_grpo = losses.grpo.item();
        gr.l_entropy = losses.entropy.item();
        gr.reward_mean = std::accumulate(groups[k].rewards.begin(), groups[k].rewards.end(), 0.0) /
                         static_cast<double>(groups[k].size());
        lambda_weighted += lambda * gr.l_entropy;
        lambda_plain += lambda;
        ent_sum += gr.l_entropy;
        grpo_sum += gr.l_grpo;
        rec.groups.push_back(gr);
      }
      const double n = static_cast<double>(groups.size());
      const Value total = scale(sum(concat(totals)), 1.0 / n);
      rec.l_total = total.item();
      rec.l_grpo = grpo_sum / n;
      rec.l_entropy = ent_sum / n;
      const bool uniform = std::all_of(rec.groups.begin(), rec.groups.end(),
                                       [&](const GroupRecord& g) { return g.lambda == rec.groups.front().lambda; });
      if (uniform) rec.lambda = rec.groups.front().lambda;
      else rec.lambda = ent_sum != 0.0 ? lambda_weighted / ent_sum : lambda_plain / n;
      if (!std::isfinite(rec.l_total)) throw NonFiniteError("total loss is not finite");
      tape.backward(total);
      grads = graph.gradients();
      adamw_step(params, grads, state);
    } catch (const NonFiniteError& e) {
      metrics_out.flush();
      if (options.write_checkpoints)
        save_checkpoint(checkpoint_path(run_dir, step - 1), params, checkpoint_meta(config, step - 1));
      write_json_file(run_dir / "result.json",
                      {{"status", "aborted"}, {"step", step}, {"last_good_step", step - 1}, {"error", e.what()}});
      throw TrainingAborted("non-finite values at step " + std::to_string(step) + ": " + e.what(), step - 1);
    }

    h_history.push_back(rec.h_token);
    if (adaptive && !switched && step < schedule.switch_step) {
      const auto& sat = *schedule.saturation;
      if (h_history.size() >= 2 * sat.window && saturation_switch(h_history, sat.window, sat.tolerance)) {
        schedule.switch_step = step;
        switched = true;
      }
    }

    if ((config.eval.every > 0 && step % config.eval.every == 0) || step == config.steps)
      rec.eval_acc = evaluate(params, eval_set);

    metrics_out << to_json(rec).dump() << '\n';
    result.metrics.push_back(std::move(rec));
    if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step != config.steps) save(step);
  }
  metrics_out.close();
  save(config.steps);

  result.switch_step = config.steps > 0 ? schedule.switch_step : 0;
  result.final_acc = config.steps > 0 ? *result.metrics.back().eval_acc : result.initial_acc;
  try {
    if (config.steps > 0) result.curve = entropy_curve_stats(h_history, result.switch_step);
  } catch (const std::invalid_argument&) {
  }
  result.final_params = params;

  json rj;
  rj["status"] = "ok";
  rj["steps"] = config.steps;
  rj["method"] = method_label(config);
  rj["noise_rate"] = config.dataset.noise_rate;
  rj["seed"] = config.seed;
  rj["switch_step"] = result.switch_step;
  rj["initial_acc"] = result.initial_acc;
  rj["final_acc"] = result.final_acc;
  rj["entropy"] = result.curve ? to_json(*result.curve) : json(nullptr);
  write_json_file(run_dir / "result.json", rj);
  return result;
}

SweepSpec sweep_spec_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("sweep config must be a JSON object");
  std::vector<std::string> bad;
  for (const auto& [k, v] : j.items())
    if (k != "base" && k != "cells" && k != "seeds") bad.push_back(k);
  if (j.contains("cells") && j.at("cells").is_array())
    for (std::size_t i = 0; i < j.at("cells").size(); ++i)
      for (const auto& [k, v] : j.at("cells")[i].items())
        if (k != "id" && k != "delta") bad.push_back("cells[" + std::to_string(i) + "]." + k);
  if (!bad.empty()) {
    std::string msg = "unknown sweep key(s): ";
    for (std::size_t i = 0; i < bad.size(); ++i) msg += (i ? ", " : "") + bad[i];
    throw ConfigError(msg, bad);
  }
  SweepSpec spec;
  spec.base = j.value("base", json::object());
  if (!j.contains("seeds") || !j.at("seeds").is_array() || j.at("seeds").empty())
    throw ConfigError("sweep: 'seeds' must be a non-empty array", {"seeds"});
  spec.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (!j.contains("cells")) {
    spec.cells.push_back({"base", json::object()});
  } else {
    std::set<std::string> ids;
    for (const auto& c : j.at("cells")) {
      SweepCell cell{c.at("id").get<std::string>(), c.value("delta", json::object())};
      if (!ids.insert(cell.id).second) throw ConfigError("sweep: duplicate cell id '" + cell.id + "'");
      spec.cells.push_back(std::move(cell));
    }
    if (spec.cells.empty()) throw ConfigError("sweep: 'cells' must not be empty", {"cells"});
  }
  // Surface schema errors before any cell runs.
  for (const auto& c : spec.cells) {
    json merged = spec.base;
    merged.merge_patch(c.delta);
    config_from_json(merged);
  }
  return spec;
}

namespace {

std::string num(double x) {
  if (std::isnan(x)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", x);
  return buf;
}

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

}  // namespace

std::string results_csv_header() {
  return "config-id,seed,noise_rate,method,switch_step,final_acc,early_entropy,peak_entropy,final_entropy";
}

std::string results_csv_line(const SweepRow& r) {
  return r.config_id + "," + std::to_string(r.seed) + "," + num(r.noise_rate) + "," + r.method + "," +
         std::to_string(r.switch_step) + "," + num(r.final_acc) + "," + num(r.early_entropy) + "," +
         num(r.peak_entropy) + "," + num(r.final_entropy);
}

std::vector<SweepRow> sweep(const SweepSpec& spec, const fs::path& out_dir, std::size_t jobs) {
  struct Job {
    const SweepCell* cell;
    std::uint64_t seed;
  };
  std::vector<Job> work;
  for (const auto& c : spec.cells)
    for (auto s : spec.seeds) work.push_back({&c, s});

  std::vector<SweepRow> rows(work.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < work.size(); i = next++) {
      const auto& [cell, seed] = work[i];
      SweepRow& row = rows[i];
      row.config_id = cell->id;
      row.seed = seed;
      row.final_acc = row.early_entropy = row.peak_entropy = row.final_entropy = nan();
      try {
        json merged = spec.base;
        merged.merge_patch(cell->delta);
        merged["seed"] = seed;
        const TrainConfig cfg = config_from_json(merged);
        row.noise_rate = cfg.dataset.noise_rate;
        row.method = method_label(cfg);
        const auto res = train(cfg, out_dir / cell->id / ("seed-" + std::to_string(seed)));
        row.switch_step = res.switch_step;
        row.final_acc = res.final_acc;
        if (res.curve) {
          row.early_entropy = res.curve->early_mean;
          row.peak_entropy = res.curve->peak;
          row.final_entropy = res.curve->final_mean;
        }
      } catch (const std::exception& e) {
        row.error = e.what();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, work.size()));
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < n_threads; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();

  fs::create_directories(out_dir);
  std::ofstream results(out_dir / "results.csv");
  std::ofstream failures(out_dir / "failures.csv");
  results << results_csv_header() << '\n';
  failures << "config-id,seed,error\n";
  for (const auto& r : rows) {
    if (r.error) {
      std::string msg = *r.error;
      std::replace(msg.begin(), msg.end(), '"', '\'');
      failures << r.config_id << ',' << r.seed << ",\"" << msg << "\"\n";
    } else {
      results << results_csv_line(r) << '\n';
    }
  }

  // Mean and sample standard deviation per cell over its successful seeds.
  std::ofstream summary(out_dir / "summary.csv");
  summary << "config-id,method,noise_rate,seeds,final_acc_mean,final_acc_std,early_entropy_mean,"
             "peak_entropy_mean,final_entropy_mean\n";
  for (const auto& c : spec.cells) {
    std::vector<const SweepRow*> ok;
    for (const auto& r : rows)
      if (r.config_id == c.id && !r.error) ok.push_back(&r);
    if (ok.empty()) continue;
    auto mean_of = [&](double SweepRow::*f) {
      double s = 0.0;
      for (const auto* r : ok) s += r->*f;
      return s / static_cast<double>(ok.size());
    };
    const double m = mean_of(&SweepRow::final_acc);
    double var = 0.0;
    for (const auto* r : ok) var += (r->final_acc - m) * (r->final_acc - m);
    const double sd = ok.size() > 1 ? std::sqrt(var / static_cast<double>(ok.size() - 1)) : 0.0;
    summary << c.id << ',' << ok.front()->method << ',' << num(ok.front()->noise_rate) << ',' << ok.size() << ','
            << num(m) << ',' << num(sd) << ',' << num(mean_of(&SweepRow::early_entropy)) << ','
            << num(mean_of(&SweepRow::peak_entropy)) << ',' << num(mean_of(&SweepRow::final_entropy)) << '\n';
  }
  return rows;
}

}  // namespace egrpo
