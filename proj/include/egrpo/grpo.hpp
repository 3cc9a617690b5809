#pragma once

// Loss and update mathematics for group-relative policy optimization with a
// token-entropy regularizer.
//
// Sign convention: every loss here is minimized. The GRPO loss is the negated
// clipped surrogate, so descending it ascends the surrogate objective, and the
// entropy loss is the negated mean sequence entropy, so a positive coefficient
// on it pushes entropy up.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "egrpo/policy.hpp"
#include "egrpo/tensor.hpp"

namespace egrpo {

inline constexpr double kSigmaFloor = 1e-6;

struct RolloutGroup {
  std::size_t sample_id = 0;
  std::vector<Trajectory> trajectories;  // each carries its old-policy log-probs
  std::vector<double> rewards;
  std::vector<double> advantages;

  std::size_t size() const { return trajectories.size(); }
};

// (r_i - mean) / pop_std; all zeros when pop_std < sigma_floor. Needs K >= 2.
std::vector<double> group_advantages(std::span<const double> rewards, double sigma_floor = kSigmaFloor);

// -(1/K) sum_i A_i sum_t log pi(y_it)
Value vanilla_pg_loss(const PolicyGraph& graph, const RolloutGroup& group);

// -(1/K) sum_i sum_t min(rho A_i, clip(rho, 1-eps, 1+eps) A_i),
// rho = exp(log pi - log pi_old).
Value surrogate_loss(const PolicyGraph& graph, const RolloutGroup& group, double clip_eps);

// -(1/K) sum_i H_token(y_i) under the graph's parameters.
Value entropy_loss(const PolicyGraph& graph, const RolloutGroup& group);
// Same reduction from already computed sequence entropies.
double entropy_loss(std::span<const double> sequence_entropies);

struct GroupLosses {
  Value grpo;
  Value entropy;
};

// Surrogate and entropy losses sharing one teacher-forced pass per trajectory.
GroupLosses group_losses(const PolicyGraph& graph, const RolloutGroup& group, double clip_eps);

// L_GRPO + lambda * L_entropy
Value total_loss(const Value& grpo_loss, const Value& entropy_loss, double lambda);
double total_loss(double grpo_loss, double entropy_loss, double lambda);

enum class ScheduleMode {
  kMaxThenMin,
  kMinThenMax,
  kCleanMaxNoisyMin,
  kNoisyMaxCleanMin,
  kConstantMax,
  kConstantMin,
  kOff,
  kLinearDecay,
};

std::string to_string(ScheduleMode mode);
ScheduleMode schedule_mode_from_string(const std::string& s);
bool is_per_subset(ScheduleMode mode);

struct SaturationTrigger {
  std::size_t window = 25;
  double tolerance = 0.01;
};

struct EntropySchedule {
  double lambda_max = 1e-2;
  double lambda_min = 1e-2;
  std::size_t switch_step = 800;
  std::size_t total_steps = 1000;
  ScheduleMode mode = ScheduleMode::kMaxThenMin;
  // When set, the run may switch before switch_step once entropy saturates.
  std::optional<SaturationTrigger> saturation;
};

void validate(const EntropySchedule& schedule);

// lambda(step) for 1 <= step <= total_steps. Per-subset modes need the sample's
// noise flag. Temporal modes switch after switch_step (inclusive boundary).
double lambda_schedule(std::size_t step, const EntropySchedule& schedule,
                       std::optional<bool> sample_is_noisy = std::nullopt);

// True when the mean of the last `window` entries differs from the mean of the
// preceding `window` entries by less than `tolerance` relative to the latter.
bool saturation_switch(std::span<const double> history, std::size_t window, double tolerance);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  // Linear decay from lr at step 1 toward 0 over this many steps; 0 = constant.
  std::size_t decay_steps = 0;
};

struct OptimizerState {
  AdamWConfig config;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::size_t step = 0;

  static OptimizerState like(std::span<const Tensor> params, const AdamWConfig& config);
  static OptimizerState like(const PolicyParams& params, const AdamWConfig& config);

  // Learning rate the given (1-based) step uses.
  double lr_at(std::size_t step) const;
};

// One decoupled-weight-decay Adam step with bias correction.
void adamw_step(std::span<Tensor> params, std::span<const Tensor> grads, OptimizerState& state);
void adamw_step(PolicyParams& params, std::span<const Tensor> grads, OptimizerState& state);

}  // namespace egrpo
