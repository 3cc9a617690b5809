#include "egrpo/grpo.hpp"

#include <cmath>
#include <stdexcept>

namespace egrpo {

std::vector<double> group_advantages(std::span<const double> rewards, double sigma_floor) {
  const std::size_t k = rewards.size();
  if (k < 2) throw std::invalid_argument("group_advantages: need at least 2 rewards, got " + std::to_string(k));
  double m = 0.0;
  for (double r : rewards) {
    if (!std::isfinite(r)) throw NonFiniteError("group_advantages: non-finite reward");
    m += r;
  }
  m /= static_cast<double>(k);
  double var = 0.0;
  for (double r : rewards) var += (r - m) * (r - m);
  const double sd = std::sqrt(var / static_cast<double>(k));
  std::vector<double> out(k, 0.0);
  if (!(sd >= sigma_floor)) return out;
  for (std::size_t i = 0; i < k; ++i) out[i] = (rewards[i] - m) / sd;
  return out;
}

namespace {

void check_group(const RolloutGroup& g) {
  if (g.trajectories.empty()) throw std::invalid_argument("rollout group is empty");
  if (g.advantages.size() != g.trajectories.size()) {
    throw std::invalid_argument("rollout group: advantages not computed for every trajectory");
  }
  for (const auto& t : g.trajectories) {
    if (t.tokens.empty()) throw std::invalid_argument("rollout group: empty trajectory");
    if (t.logprobs.size() != t.tokens.size()) throw std::invalid_argument("rollout group: old log-probs missing");
  }
}

Value vector_of(std::span<const PolicyGraph::Step> steps, bool entropy) {
  std::vector<Value> xs;
  xs.reserve(steps.size());
  for (const auto& s : steps) xs.push_back(entropy ? s.entropy : s.logprob);
  return concat(xs);
}

Value surrogate_term(Tape& tape, const Trajectory& tr, std::span<const PolicyGraph::Step> steps,
                     double advantage, double clip_eps) {
  const Value logp = vector_of(steps, false);
  const Value old = tape.constant(Tensor({tr.logprobs.size()}, tr.logprobs));
  const Value ratio = exp(logp - old);
  const Value unclipped = scale(ratio, advantage);
  const Value clipped = scale(clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps), advantage);
  return sum(minimum(unclipped, clipped));
}

Value group_mean_negated(std::span<const Value> terms) {
  return scale(sum(concat(terms)), -1.0 / static_cast<double>(terms.size()));
}

}  // namespace

Value vanilla_pg_loss(const PolicyGraph& graph, const RolloutGroup& group) {
  check_group(group);
  std::vector<Value> terms;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const auto& tr = group.trajectories[i];
    const auto steps = graph.steps(tr.prompt, tr.tokens);
    terms.push_back(scale(sum(vector_of(steps, false)), group.advantages[i]));
  }
  return group_mean_negated(terms);
}

Value surrogate_loss(const PolicyGraph& graph, const RolloutGroup& group, double clip_eps) {
  return group_losses(graph, group, clip_eps).grpo;
}

Value entropy_loss(const PolicyGraph& graph, const RolloutGroup& group) {
  check_group(group);
  std::vector<Value> terms;
  for (const auto& tr : group.trajectories) {
    const auto steps = graph.steps(tr.prompt, tr.tokens);
    terms.push_back(mean(vector_of(steps, true)));
  }
  return group_mean_negated(terms);
}

double entropy_loss(std::span<const double> sequence_entropies) {
  if (sequence_entropies.empty()) throw std::invalid_argument("entropy_loss: empty group");
  double s = 0.0;
  for (double h : sequence_entropies) s += h;
  return -s / static_cast<double>(sequence_entropies.size());
}

GroupLosses group_losses(const PolicyGraph& graph, const RolloutGroup& group, double clip_eps) {
  check_group(group);
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw std::invalid_argument("clip epsilon must be in (0, 1)");
  std::vector<Value> surrogate, entropy;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const auto& tr = group.trajectories[i];
    const auto steps = graph.steps(tr.prompt, tr.tokens);
    surrogate.push_back(surrogate_term(graph.tape(), tr, steps, group.advantages[i], clip_eps));
    entropy.push_back(mean(vector_of(steps, true)));
  }
  return {group_mean_negated(surrogate), group_mean_negated(entropy)};
}

Value total_loss(const Value& grpo_loss, const Value& entropy_loss, double lambda) {
  return add(grpo_loss, scale(entropy_loss, lambda));
}

double total_loss(double grpo_loss, double entropy_loss, double lambda) { return grpo_loss + lambda * entropy_loss; }

std::string to_string(ScheduleMode mode) {
  switch (mode) {
    case ScheduleMode::kMaxThenMin: return "max-then-min";
    case ScheduleMode::kMinThenMax: return "min-then-max";
    case ScheduleMode::kCleanMaxNoisyMin: return "clean-max-noisy-min";
    case ScheduleMode::kNoisyMaxCleanMin: return "noisy-max-clean-min";
    case ScheduleMode::kConstantMax: return "constant-max";
    case ScheduleMode::kConstantMin: return "constant-min";
    case ScheduleMode::kOff: return "off";
    case ScheduleMode::kLinearDecay: return "linear-decay";
  }
  return "?";
}

ScheduleMode schedule_mode_from_string(const std::string& s) {
  for (auto m : {ScheduleMode::kMaxThenMin, ScheduleMode::kMinThenMax, ScheduleMode::kCleanMaxNoisyMin,
                 ScheduleMode::kNoisyMaxCleanMin, ScheduleMode::kConstantMax, ScheduleMode::kConstantMin,
                 ScheduleMode::kOff, ScheduleMode::kLinearDecay}) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown schedule mode '" + s + "'");
}

bool is_per_subset(ScheduleMode mode) {
  return mode == ScheduleMode::kCleanMaxNoisyMin || mode == ScheduleMode::kNoisyMaxCleanMin;
}

void validate(const EntropySchedule& s) {
  if (!(s.lambda_max > 0.0) || !(s.lambda_min > 0.0) || !std::isfinite(s.lambda_max) || !std::isfinite(s.lambda_min)) {
    throw std::invalid_argument("schedule: lambda_max and lambda_min must be positive and finite");
  }
  if (s.total_steps < 1) throw std::invalid_argument("schedule: total_steps must be at least 1");
  if (s.switch_step < 1 || s.switch_step > s.total_steps) {
    throw std::invalid_argument("schedule: switch_step must lie in [1, total_steps]");
  }
  if (s.saturation && s.saturation->window < 2) throw std::invalid_argument("schedule: saturation window must be >= 2");
}

double lambda_schedule(std::size_t step, const EntropySchedule& s, std::optional<bool> sample_is_noisy) {
  if (step < 1 || step > s.total_steps) {
    throw std::out_of_range("lambda_schedule: step " + std::to_string(step) + " outside [1, " +
                            std::to_string(s.total_steps) + "]");
  }
  const bool stage_one = step <= s.switch_step;
  switch (s.mode) {
    case ScheduleMode::kMaxThenMin: return stage_one ? s.lambda_max : -s.lambda_min;
    case ScheduleMode::kMinThenMax: return stage_one ? -s.lambda_min : s.lambda_max;
    case ScheduleMode::kCleanMaxNoisyMin:
    case ScheduleMode::kNoisyMaxCleanMin: {
      if (!sample_is_noisy) throw std::invalid_argument("lambda_schedule: " + to_string(s.mode) + " needs the noise flag");
      const bool maximize = (s.mode == ScheduleMode::kCleanMaxNoisyMin) != *sample_is_noisy;
      return maximize ? s.lambda_max : -s.lambda_min;
    }
    case ScheduleMode::kConstantMax: return s.lambda_max;
    case ScheduleMode::kConstantMin: return -s.lambda_min;
    case ScheduleMode::kOff: return 0.0;
    case ScheduleMode::kLinearDecay: {
      if (s.total_steps == 1) return s.lambda_max;
      const double frac = static_cast<double>(step - 1) / static_cast<double>(s.total_steps - 1);
      return s.lambda_max + frac * (-s.lambda_min - s.lambda_max);
    }
  }
  return 0.0;
}

bool saturation_switch(std::span<const double> history, std::size_t window, double tolerance) {
  if (window < 2) throw std::invalid_argument("saturation_switch: window must be >= 2");
  if (history.size() < 2 * window) {
    throw std::invalid_argument("saturation_switch: history of " + std::to_string(history.size()) +
                                " entries is shorter than two windows");
  }
  const std::size_t n = history.size();
  double recent = 0.0, previous = 0.0;
  for (std::size_t i = n - window; i < n; ++i) recent += history[i];
  for (std::size_t i = n - 2 * window; i < n - window; ++i) previous += history[i];
  recent /= static_cast<double>(window);
  previous /= static_cast<double>(window);
  const double denom = std::max(std::abs(previous), 1e-12);
  return std::abs(recent - previous) / denom < tolerance;
}

OptimizerState OptimizerState::like(std::span<const Tensor> params, const AdamWConfig& config) {
  OptimizerState s;
  s.config = config;
  for (const auto& p : params) {
    s.first_moment.push_back(Tensor::zeros(p.shape));
    s.second_moment.push_back(Tensor::zeros(p.shape));
  }
  return s;
}

OptimizerState OptimizerState::like(const PolicyParams& params, const AdamWConfig& config) {
  std::vector<Tensor> ts;
  for (const auto& t : params.tensors) ts.push_back(t.value);
  return like(ts, config);
}

double OptimizerState::lr_at(std::size_t t) const {
  if (config.decay_steps == 0) return config.lr;
  if (t > config.decay_steps) return 0.0;
  return config.lr * static_cast<double>(config.decay_steps - t + 1) / static_cast<double>(config.decay_steps);
}

void adamw_step(std::span<Tensor> params, std::span<const Tensor> grads, OptimizerState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ShapeError("adamw_step: parameter, gradient and state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape != grads[i].shape || params[i].shape != state.first_moment[i].shape) {
      throw ShapeError("adamw_step: shape mismatch for parameter " + std::to_string(i) + ": " +
                       shape_str(params[i].shape) + " vs grad " + shape_str(grads[i].shape));
    }
  }
  for (const auto& g : grads)
    for (double x : g.data)
      if (!std::isfinite(x)) throw NonFiniteError("adamw_step: non-finite gradient");
  const auto& c = state.config;
  const std::size_t t = ++state.step;
  const double lr = state.lr_at(t);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].data;
    const auto& g = grads[i].data;
    auto& m = state.first_moment[i].data;
    auto& v = state.second_moment[i].data;
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr * c.weight_decay * p[j];
      p[j] -= lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

void adamw_step(PolicyParams& params, std::span<const Tensor> grads, OptimizerState& state) {
  std::vector<Tensor> ts;
  ts.reserve(params.tensors.size());
  for (auto& t : params.tensors) ts.push_back(std::move(t.value));
  try {
    adamw_step(std::span<Tensor>(ts), grads, state);
  } catch (...) {
    for (std::size_t i = 0; i < ts.size(); ++i) params.tensors[i].value = std::move(ts[i]);
    throw;
  }
  for (std::size_t i = 0; i < ts.size(); ++i) params.tensors[i].value = std::move(ts[i]);
}

}  // namespace egrpo
