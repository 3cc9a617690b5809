#include <doctest.h>

#include <cmath>

#include "egrpo/grpo.hpp"
#include "finite_diff.hpp"
#include "fixtures.hpp"

using namespace egrpo;
using namespace egrpo::testing;

namespace {

struct LossGrad {
  double value;
  std::vector<Tensor> grads;
};

template <typename F>
LossGrad loss_and_grad(const PolicyParams& p, F build) {
  Tape tape;
  PolicyGraph g(tape, p);
  const Value loss = build(g);
  tape.backward(loss);
  return {loss.item(), g.gradients()};
}

template <typename F>
double loss_only(const PolicyParams& p, F build) {
  Tape tape(false);
  PolicyGraph g(tape, p);
  return build(g).item();
}

// Two-token vocabulary whose head ignores the context: log pi(1) = log_q.
PolicyParams fixed_distribution(double log_q) {
  PolicyConfig c = tiny_policy_config(2);
  c.head_init = 0.0;
  auto p = PolicyParams::init(c, 1);
  const double q = std::exp(log_q);
  p.at("head.bias").data = {0.0, std::log(q / (1.0 - q))};
  return p;
}

Trajectory ones(std::size_t t, const PolicyParams& p) {
  Trajectory tr;
  tr.prompt = {1};
  tr.tokens.assign(t, 1);
  Tape tape(false);
  PolicyGraph g(tape, p);
  for (const auto& s : g.steps(tr.prompt, tr.tokens)) {
    tr.logprobs.push_back(s.logprob.item());
    tr.entropies.push_back(s.entropy.item());
  }
  return tr;
}

}  // namespace

TEST_CASE("advantages of a single success among four") {
  const std::vector<double> r = {1, 0, 0, 0};
  const auto a = group_advantages(r);
  // mean 0.25, population std sqrt(0.1875)
  CHECK(std::abs(a[0] - 1.7320508075688772) < 1e-9);
  for (int i = 1; i < 4; ++i) CHECK(std::abs(a[i] + 0.5773502691896258) < 1e-9);
}

TEST_CASE("identical rewards give exactly zero advantages") {
  for (double v : {0.0, 1.0, 0.37}) {
    const std::vector<double> r(8, v);
    for (double a : group_advantages(r)) CHECK(a == 0.0);
  }
  const std::vector<double> nearly = {1.0, 1.0 + 1e-9};
  for (double a : group_advantages(nearly)) CHECK(a == 0.0);
}

TEST_CASE("advantages need at least two rewards") {
  const std::vector<double> one = {1.0};
  CHECK_THROWS_AS(group_advantages(one), std::invalid_argument);
}

TEST_CASE("non-finite rewards are rejected") {
  const std::vector<double> r = {1.0, std::nan(""), 0.0};
  CHECK_THROWS_AS(group_advantages(r), NonFiniteError);
}

TEST_CASE("advantage normalization properties") {
  RngStream rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t k = 2 + rng.below(12);
    std::vector<double> r(k);
    for (auto& x : r) x = rng.bernoulli(0.3) ? 1.0 : (rng.bernoulli(0.5) ? 0.0 : rng.uniform());
    const auto a = group_advantages(r);
    double m = 0.0, v = 0.0;
    for (double x : a) m += x;
    m /= double(k);
    for (double x : a) v += (x - m) * (x - m);
    const double sd = std::sqrt(v / double(k));
    CHECK(std::abs(m) < 1e-12);
    CHECK((sd == 0.0 || std::abs(sd - 1.0) < 1e-9));

    const double scale_by = 0.1 + 5.0 * rng.uniform();
    const double shift = rng.normal() * 10.0;
    std::vector<double> t(k);
    for (std::size_t i = 0; i < k; ++i) t[i] = scale_by * r[i] + shift;
    const auto b = group_advantages(t);
    for (std::size_t i = 0; i < k; ++i) CHECK(std::abs(a[i] - b[i]) < 1e-12);
  }
  const std::vector<double> r = {1, 0, 1, 1, 0};
  std::vector<double> t;
  for (double x : r) t.push_back(2.0 * x + 5.0);
  const auto a = group_advantages(r), b = group_advantages(t);
  for (std::size_t i = 0; i < r.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-12);
}

TEST_CASE("vanilla policy-gradient loss") {
  const auto p = PolicyParams::init(tiny_policy_config(), 3);
  auto g = random_group(p, 1);
  std::fill(g.advantages.begin(), g.advantages.end(), 0.0);
  const auto lg = loss_and_grad(p, [&](const PolicyGraph& pg) { return vanilla_pg_loss(pg, g); });
  CHECK(lg.value == 0.0);
  CHECK(max_abs(lg.grads) == 0.0);

  // K = 1, A = 1, T = 2, log-probs summing to -3
  const auto q = fixed_distribution(-1.5);
  RolloutGroup one;
  one.trajectories = {ones(2, q)};
  one.advantages = {1.0};
  CHECK(std::abs(loss_only(q, [&](const PolicyGraph& pg) { return vanilla_pg_loss(pg, one); }) - 3.0) < 1e-12);
}

TEST_CASE("surrogate loss arithmetic") {
  const auto q = fixed_distribution(-0.7);
  RolloutGroup g;
  g.trajectories = {ones(2, q)};
  g.advantages = {1.0};
  // theta == theta_old: min(1*1, 1*1) per token, two tokens
  CHECK(std::abs(loss_only(q, [&](const PolicyGraph& pg) { return surrogate_loss(pg, g, 0.2); }) + 2.0) < 1e-12);

  // single token with rho = 1.5, A = 1 -> min(1.5, 1.2)
  RolloutGroup up;
  up.trajectories = {ones(1, q)};
  up.trajectories[0].logprobs[0] -= std::log(1.5);
  up.advantages = {1.0};
  CHECK(std::abs(loss_only(q, [&](const PolicyGraph& pg) { return surrogate_loss(pg, up, 0.2); }) + 1.2) < 1e-12);

  // single token with rho = 0.5, A = -1 -> min(-0.5, -0.8)
  RolloutGroup down;
  down.trajectories = {ones(1, q)};
  down.trajectories[0].logprobs[0] -= std::log(0.5);
  down.advantages = {-1.0};
  CHECK(std::abs(loss_only(q, [&](const PolicyGraph& pg) { return surrogate_loss(pg, down, 0.2); }) - 0.8) < 1e-12);

  CHECK_THROWS(loss_only(q, [&](const PolicyGraph& pg) { return surrogate_loss(pg, g, 1.5); }));
}

TEST_CASE("surrogate and vanilla gradients coincide at theta_old") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto p = PolicyParams::init(tiny_policy_config(), 50 + s);
    const auto g = random_group(p, s);
    const auto a = loss_and_grad(p, [&](const PolicyGraph& pg) { return surrogate_loss(pg, g, 0.2); });
    const auto b = loss_and_grad(p, [&](const PolicyGraph& pg) { return vanilla_pg_loss(pg, g); });
    CHECK(relative_error(a.grads, b.grads) < 1e-9);
  }
}

TEST_CASE("surrogate gradient matches finite differences away from theta_old") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto p = PolicyParams::init(tiny_policy_config(), 70 + s);
    RandomGroupOptions opt;
    opt.old_logprob_jitter = 0.1;
    const auto g = random_group(p, s, opt);
    const auto lg = loss_and_grad(p, [&](const PolicyGraph& pg) { return surrogate_loss(pg, g, 0.2); });
    auto f = [&](const std::vector<Tensor>& xs) {
      return loss_only(with_values(p, xs), [&](const PolicyGraph& pg) { return surrogate_loss(pg, g, 0.2); });
    };
    CHECK(relative_error(lg.grads, central_differences(f, values_of(p))) < 1e-5);
  }
}

TEST_CASE("clipped tokens contribute no gradient") {
  const auto p = PolicyParams::init(tiny_policy_config(), 5);
  auto make = [&](double advantage, double ratio) {
    RolloutGroup g = random_group(p, 3, {.k = 1 + 1, .max_length = 1});
    g.trajectories.resize(1);
    g.trajectories[0].logprobs[0] -= std::log(ratio);
    g.advantages = {advantage};
    return g;
  };
  for (auto [adv, ratio] : {std::pair{1.0, 1.5}, std::pair{0.7, 1.25}, std::pair{-1.0, 0.5}, std::pair{-0.3, 0.79}}) {
    const auto g = make(adv, ratio);
    const auto lg = loss_and_grad(p, [&](const PolicyGraph& pg) { return surrogate_loss(pg, g, 0.2); });
    CHECK(max_abs(lg.grads) == 0.0);
    auto f = [&](const std::vector<Tensor>& xs) {
      return loss_only(with_values(p, xs), [&](const PolicyGraph& pg) { return surrogate_loss(pg, g, 0.2); });
    };
    CHECK(max_abs(central_differences(f, values_of(p))) < 1e-8);
  }
  // the other side of the clip range still carries gradient
  const auto live = make(1.0, 0.5);
  CHECK(max_abs(loss_and_grad(p, [&](const PolicyGraph& pg) { return surrogate_loss(pg, live, 0.2); }).grads) > 0.0);
}

TEST_CASE("identical rewards gate the surrogate gradient to zero") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto p = PolicyParams::init(tiny_policy_config(), 90 + s);
    RandomGroupOptions opt;
    opt.identical_rewards = true;
    opt.old_logprob_jitter = 0.2;
    const auto g = random_group(p, s, opt);
    const auto lg = loss_and_grad(p, [&](const PolicyGraph& pg) { return surrogate_loss(pg, g, 0.2); });
    CHECK(max_abs(lg.grads) == 0.0);
    const auto le = loss_and_grad(p, [&](const PolicyGraph& pg) { return entropy_loss(pg, g); });
    CHECK(max_abs(le.grads) > 0.0);
  }
}

TEST_CASE("entropy loss") {
  const std::vector<double> h = {1.2, 0.8};
  CHECK(std::abs(entropy_loss(h) + 1.0) < 1e-15);

  auto c = tiny_policy_config(4);
  c.head_init = 0.0;
  const auto u = PolicyParams::init(c, 1);
  const auto g = random_group(u, 2);
  CHECK(std::abs(loss_only(u, [&](const PolicyGraph& pg) { return entropy_loss(pg, g); }) + std::log(4.0)) < 1e-12);
}

TEST_CASE("entropy loss is bounded by the uniform entropy") {
  for (std::uint64_t s = 0; s < 100; ++s) {
    auto c = tiny_policy_config(5);
    c.head_init = 0.2 + double(s % 10);
    const auto p = PolicyParams::init(c, 200 + s);
    const auto g = random_group(p, s);
    const double l = loss_only(p, [&](const PolicyGraph& pg) { return entropy_loss(pg, g); });
    CHECK(l >= -std::log(5.0));
    CHECK(l <= 0.0);
  }
}

TEST_CASE("entropy and total loss gradients match finite differences") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto p = PolicyParams::init(tiny_policy_config(), 300 + s);
    RandomGroupOptions opt;
    opt.old_logprob_jitter = 0.05;
    const auto g = random_group(p, s, opt);
    auto build = [&](const PolicyGraph& pg) {
      const auto l = group_losses(pg, g, 0.2);
      return total_loss(l.grpo, l.entropy, 0.3);
    };
    const auto lg = loss_and_grad(p, build);
    auto f = [&](const std::vector<Tensor>& xs) { return loss_only(with_values(p, xs), build); };
    CHECK(relative_error(lg.grads, central_differences(f, values_of(p))) < 1e-5);

    const auto le = loss_and_grad(p, [&](const PolicyGraph& pg) { return entropy_loss(pg, g); });
    auto fe = [&](const std::vector<Tensor>& xs) {
      return loss_only(with_values(p, xs), [&](const PolicyGraph& pg) { return entropy_loss(pg, g); });
    };
    CHECK(relative_error(le.grads, central_differences(fe, values_of(p))) < 1e-5);
  }
}

TEST_CASE("group_losses agrees with the separate loss functions") {
  const auto p = PolicyParams::init(tiny_policy_config(), 8);
  RandomGroupOptions opt;
  opt.old_logprob_jitter = 0.3;
  const auto g = random_group(p, 4, opt);
  Tape tape(false);
  PolicyGraph pg(tape, p);
  const auto both = group_losses(pg, g, 0.2);
  CHECK(both.grpo.item() == surrogate_loss(pg, g, 0.2).item());
  CHECK(both.entropy.item() == entropy_loss(pg, g).item());
}

TEST_CASE("total loss") {
  CHECK(std::abs(total_loss(0.5, -1.0, 0.01) - 0.49) < 1e-15);
  CHECK(total_loss(0.5, -1.0, 0.0) == 0.5);
}

TEST_CASE("positive coefficient raises entropy under gradient descent") {
  const auto p = PolicyParams::init(tiny_policy_config(), 17);
  RandomGroupOptions opt;
  opt.identical_rewards = true;  // L_GRPO is constant
  const auto g = random_group(p, 1, opt);
  for (double lambda : {0.01, -0.01}) {
    const auto lg = loss_and_grad(p, [&](const PolicyGraph& pg) {
      const auto l = group_losses(pg, g, 0.2);
      return total_loss(l.grpo, l.entropy, lambda);
    });
    auto stepped = values_of(p);
    const double eta = 1e-3 / std::abs(lambda);
    for (std::size_t i = 0; i < stepped.size(); ++i)
      for (std::size_t j = 0; j < stepped[i].size(); ++j) stepped[i].data[j] -= eta * lg.grads[i].data[j];
    auto mean_h = [&](const PolicyParams& q) {
      return -loss_only(q, [&](const PolicyGraph& pg) { return entropy_loss(pg, g); });
    };
    const double before = mean_h(p), after = mean_h(with_values(p, stepped));
    if (lambda > 0) CHECK(after > before);
    else CHECK(after < before);
  }
}

TEST_CASE("lambda schedule at the stage boundary") {
  EntropySchedule s;
  s.lambda_max = s.lambda_min = 0.01;
  s.switch_step = 800;
  s.total_steps = 1000;
  CHECK(lambda_schedule(1, s) == 0.01);
  CHECK(lambda_schedule(800, s) == 0.01);
  CHECK(lambda_schedule(801, s) == -0.01);
  CHECK(lambda_schedule(1000, s) == -0.01);
  CHECK_THROWS(lambda_schedule(0, s));
  CHECK_THROWS(lambda_schedule(1001, s));
  s.mode = ScheduleMode::kOff;
  for (std::size_t t = 1; t <= 1000; ++t) CHECK(lambda_schedule(t, s) == 0.0);
  s.mode = ScheduleMode::kMinThenMax;
  CHECK(lambda_schedule(800, s) == -0.01);
  CHECK(lambda_schedule(801, s) == 0.01);
}

TEST_CASE("max-then-min trace flips sign exactly once") {
  EntropySchedule s;
  s.lambda_max = 0.02;
  s.lambda_min = 0.005;
  s.switch_step = 7;
  s.total_steps = 10;
  std::vector<double> trace;
  for (std::size_t t = 1; t <= 10; ++t) trace.push_back(lambda_schedule(t, s));
  CHECK(trace == std::vector<double>{0.02, 0.02, 0.02, 0.02, 0.02, 0.02, 0.02, -0.005, -0.005, -0.005});
}

TEST_CASE("per-subset schedules") {
  EntropySchedule s;
  s.mode = ScheduleMode::kCleanMaxNoisyMin;
  CHECK(lambda_schedule(5, s, false) == s.lambda_max);
  CHECK(lambda_schedule(5, s, true) == -s.lambda_min);
  CHECK(lambda_schedule(900, s, false) == s.lambda_max);
  CHECK_THROWS_AS(lambda_schedule(5, s), std::invalid_argument);
  s.mode = ScheduleMode::kNoisyMaxCleanMin;
  CHECK(lambda_schedule(5, s, true) == s.lambda_max);
  CHECK(lambda_schedule(5, s, false) == -s.lambda_min);
}

TEST_CASE("constant and linear-decay schedules") {
  EntropySchedule s;
  s.lambda_max = 0.02;
  s.lambda_min = 0.01;
  s.total_steps = 11;
  s.switch_step = 5;
  s.mode = ScheduleMode::kConstantMax;
  CHECK(lambda_schedule(11, s) == 0.02);
  s.mode = ScheduleMode::kConstantMin;
  CHECK(lambda_schedule(1, s) == -0.01);
  s.mode = ScheduleMode::kLinearDecay;
  CHECK(lambda_schedule(1, s) == 0.02);
  CHECK(std::abs(lambda_schedule(6, s) - 0.005) < 1e-15);
  CHECK(std::abs(lambda_schedule(11, s) + 0.01) < 1e-15);
}

TEST_CASE("schedule validation") {
  EntropySchedule s;
  s.switch_step = 0;
  CHECK_THROWS(validate(s));
  s.switch_step = 1001;
  CHECK_THROWS(validate(s));
  s.switch_step = 1000;
  CHECK_NOTHROW(validate(s));
  s.lambda_min = 0.0;
  CHECK_THROWS(validate(s));
  for (auto m : {"max-then-min", "min-then-max", "clean-max-noisy-min", "noisy-max-clean-min", "constant-max",
                 "constant-min", "off", "linear-decay"})
    CHECK(to_string(schedule_mode_from_string(m)) == m);
  CHECK_THROWS(schedule_mode_from_string("max"));
}

TEST_CASE("saturation switch") {
  const std::vector<double> flat(40, 2.5);
  CHECK(saturation_switch(flat, 10, 1e-3));
  std::vector<double> ramp;
  for (int i = 0; i < 40; ++i) ramp.push_back(1.0 + 0.05 * i);
  CHECK_FALSE(saturation_switch(ramp, 10, 0.01));
  CHECK_THROWS(saturation_switch(std::span(flat).first(19), 10, 0.01));
  CHECK_THROWS(saturation_switch(flat, 1, 0.01));
}

TEST_CASE("saturation switch fires within one window of a plateau") {
  // Ramp 1 -> 2 over 100 steps, then flat. Oracle: the earliest history length
  // n at which both compared windows are flat is onset + 2 * window, so the
  // newer window starts at most one window after the onset.
  const std::size_t onset = 100, window = 10;
  std::vector<double> curve;
  for (std::size_t i = 0; i < 200; ++i) curve.push_back(i < onset ? 1.0 + double(i) / double(onset) : 2.0);
  std::size_t fired = 0;
  for (std::size_t n = 2 * window; n <= curve.size(); ++n) {
    if (saturation_switch(std::span(curve).first(n), window, 0.01)) {
      fired = n;
      break;
    }
  }
  REQUIRE(fired > 0);
  const std::size_t newer_window_start = fired - window;
  CHECK(newer_window_start >= onset - window);
  CHECK(newer_window_start <= onset + window);
  // never fires on the ramp itself
  CHECK(fired > onset);
}

TEST_CASE("adamw examples") {
  AdamWConfig cfg;
  cfg.lr = 0.1;
  {
    std::vector<Tensor> theta = {Tensor({2}, {0.3, -1.2})};
    auto st = OptimizerState::like(theta, cfg);
    const std::vector<Tensor> zero = {Tensor::zeros({2})};
    adamw_step(theta, zero, st);
    CHECK(theta[0].data == std::vector<double>{0.3, -1.2});
    CHECK(st.step == 1);
  }
  {
    std::vector<Tensor> theta = {Tensor::scalar(1.0)};
    auto st = OptimizerState::like(theta, cfg);
    const std::vector<Tensor> g = {Tensor::scalar(1.0)};
    adamw_step(theta, g, st);
    // m_hat = v_hat = 1, so the step is lr / (1 + eps)
    CHECK(std::abs(theta[0].data[0] - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-15);
    CHECK(std::abs(theta[0].data[0] - 0.9) < 1e-8);
  }
  {
    cfg.weight_decay = 0.01;
    std::vector<Tensor> theta = {Tensor::scalar(2.0)};
    auto st = OptimizerState::like(theta, cfg);
    const std::vector<Tensor> zero = {Tensor::scalar(0.0)};
    adamw_step(theta, zero, st);
    CHECK(theta[0].data[0] == 2.0 * (1.0 - 0.001));
  }
}

TEST_CASE("adamw rejects mismatched shapes and non-finite gradients") {
  AdamWConfig cfg;
  std::vector<Tensor> theta = {Tensor::zeros({2})};
  auto st = OptimizerState::like(theta, cfg);
  const std::vector<Tensor> wrong = {Tensor::zeros({3})};
  CHECK_THROWS_AS(adamw_step(theta, wrong, st), ShapeError);
  const std::vector<Tensor> bad = {Tensor({2}, {0.0, std::nan("")})};
  CHECK_THROWS_AS(adamw_step(theta, bad, st), NonFiniteError);
  CHECK(st.step == 0);
}

TEST_CASE("learning rate decays linearly to zero") {
  AdamWConfig cfg;
  cfg.lr = 1e-3;
  cfg.decay_steps = 4;
  OptimizerState st;
  st.config = cfg;
  CHECK(st.lr_at(1) == 1e-3);
  CHECK(st.lr_at(4) == 0.25e-3);
  CHECK(st.lr_at(5) == 0.0);
  st.config.decay_steps = 0;
  CHECK(st.lr_at(1000) == 1e-3);
}
