#pragma once

// Random small policies and rollout groups for gradient checks.

#include <vector>

#include "egrpo/grpo.hpp"
#include "egrpo/policy.hpp"
#include "egrpo/rng.hpp"

namespace egrpo::testing {

inline PolicyConfig tiny_policy_config(std::size_t vocab = 5) {
  PolicyConfig c;
  c.vocab_size = vocab;
  c.context_window = 4;
  c.embed_dim = 3;
  c.hidden_dim = 4;
  c.layers = 2;
  c.head_init = 1.5;
  return c;
}

inline std::vector<Tensor> values_of(const PolicyParams& p) {
  std::vector<Tensor> out;
  for (const auto& t : p.tensors) out.push_back(t.value);
  return out;
}

inline PolicyParams with_values(PolicyParams p, const std::vector<Tensor>& xs) {
  for (std::size_t i = 0; i < xs.size(); ++i) p.tensors[i].value = xs[i];
  return p;
}

struct RandomGroupOptions {
  std::size_t k = 4;
  std::size_t max_length = 3;
  // Std of noise added to the recorded old log-probs (0 keeps theta == theta_old).
  double old_logprob_jitter = 0.0;
  bool identical_rewards = false;
};

// Samples a group from `params` and attaches Bernoulli rewards + advantages.
inline RolloutGroup random_group(const PolicyParams& params, std::uint64_t seed, const RandomGroupOptions& opt = {}) {
  auto rng = RngStream::keyed(RngPurpose::kReward, {seed, 99});
  RolloutGroup g;
  g.sample_id = seed;
  const std::vector<Token> prompt = {static_cast<Token>(1 + seed % (params.config.vocab_size - 1)), 1};
  for (std::size_t i = 0; i < opt.k; ++i) {
    auto r = RngStream::keyed(RngPurpose::kRollout, {seed, i});
    auto tr = sample_response(params, prompt, opt.max_length, r);
    for (auto& lp : tr.logprobs) lp += opt.old_logprob_jitter * rng.normal();
    g.trajectories.push_back(std::move(tr));
    g.rewards.push_back(opt.identical_rewards ? 1.0 : (rng.bernoulli(0.5) ? 1.0 : 0.0));
  }
  if (!opt.identical_rewards) {
    // make sure rewards are not all equal
    g.rewards[0] = 1.0;
    g.rewards[1] = 0.0;
  }
  g.advantages = group_advantages(g.rewards);
  return g;
}

}  // namespace egrpo::testing
