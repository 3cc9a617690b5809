// Acceptance checks. Prints one PASS/FAIL line per criterion.
//
//   acceptance            run all ten
//   acceptance 6 7        run only the listed criteria

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "egrpo/config.hpp"
#include "egrpo/grpo.hpp"
#include "egrpo/harness.hpp"
#include "finite_diff.hpp"
#include "fixtures.hpp"

using namespace egrpo;
using namespace egrpo::testing;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... xs) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, xs...);
  return buf;
}

json toy_json() {
  std::ifstream in(fs::path(EGRPO_SOURCE_DIR) / "configs" / "toy-grid.json");
  if (!in) throw std::runtime_error("cannot read configs/toy-grid.json");
  return json::parse(in);
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / "egrpo_acceptance" / name;
  fs::remove_all(d);
  return d;
}

TrainOptions quiet() {
  TrainOptions o;
  o.write_checkpoints = false;
  return o;
}

std::vector<Tensor> grad_of(const PolicyParams& p, const std::function<Value(const PolicyGraph&)>& build) {
  Tape tape;
  PolicyGraph g(tape, p);
  tape.backward(build(g));
  return g.gradients();
}

double value_of(const PolicyParams& p, const std::function<Value(const PolicyGraph&)>& build) {
  Tape tape(false);
  PolicyGraph g(tape, p);
  return build(g).item();
}

double norm(const std::vector<Tensor>& a) {
  double s = 0;
  for (const auto& t : a)
    for (double x : t.data) s += x * x;
  return std::sqrt(s);
}

// Relative error with the denominator floored at 1e-8, so a gradient that is
// zero up to round-off is not compared digit by digit against FD noise.
constexpr double kGradFloor = 1e-8;
int floored_cases = 0;

double fd_error(const PolicyParams& p, const std::function<Value(const PolicyGraph&)>& build) {
  auto f = [&](const std::vector<Tensor>& xs) { return value_of(with_values(p, xs), build); };
  const auto an = grad_of(p, build), fd = central_differences(f, values_of(p));
  std::vector<Tensor> diff = an;
  for (std::size_t i = 0; i < diff.size(); ++i)
    for (std::size_t j = 0; j < diff[i].size(); ++j) diff[i].data[j] -= fd[i].data[j];
  const double scale = std::max({norm(an), norm(fd), kGradFloor});
  if (scale == kGradFloor) ++floored_cases;
  return norm(diff) / scale;
}

Verdict c1_gradient_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_s = 0, worst_e = 0, worst_t = 0;
  const int cases = 120;
  for (int s = 0; s < cases; ++s) {
    auto cfg = tiny_policy_config(3 + s % 5);
    cfg.layers = 1 + s % 3;
    cfg.head_init = 0.5 + 0.25 * (s % 7);
    const auto p = PolicyParams::init(cfg, 1000 + s);
    RandomGroupOptions opt;
    opt.k = 2 + s % 5;
    opt.max_length = 1 + s % 4;
    opt.old_logprob_jitter = 0.05 * (s % 4);
    const auto g = random_group(p, 5000 + s, opt);
    const double eps = 0.1 + 0.05 * (s % 4), lambda = (s % 2 ? 1 : -1) * 0.05 * (1 + s % 6);
    worst_s = std::max(worst_s, fd_error(p, [&](const PolicyGraph& pg) { return surrogate_loss(pg, g, eps); }));
    worst_e = std::max(worst_e, fd_error(p, [&](const PolicyGraph& pg) { return entropy_loss(pg, g); }));
    worst_t = std::max(worst_t, fd_error(p, [&](const PolicyGraph& pg) {
                         const auto l = group_losses(pg, g, eps);
                         return total_loss(l.grpo, l.entropy, lambda);
                       }));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool ok = worst_s < 1e-5 && worst_e < 1e-5 && worst_t < 1e-5 && secs < 120;
  return {ok, fmt("%d cases; max rel err surrogate %.2e, entropy %.2e, total %.2e; %d gradient(s) below the %.0e "
                  "norm floor; %.1fs",
                  cases, worst_s, worst_e, worst_t, floored_cases, kGradFloor, secs)};
}

Verdict c2_advantages() {
  const std::vector<double> r = {1, 0, 0, 0};
  const auto a = group_advantages(r);
  // 1.7320508 and -0.5773503 are sqrt(3) and -1/sqrt(3) rounded to 7 decimals
  double err = std::abs(a[0] - std::sqrt(3.0)), quoted = std::abs(a[0] - 1.7320508);
  for (int i = 1; i < 4; ++i) {
    err = std::max(err, std::abs(a[i] + 1.0 / std::sqrt(3.0)));
    quoted = std::max(quoted, std::abs(a[i] + 0.5773503));
  }
  bool zeros = true;
  for (double v : {0.0, 1.0, 0.25, -3.0})
    for (std::size_t k : {2, 4, 8})
      for (double x : group_advantages(std::vector<double>(k, v))) zeros = zeros && x == 0.0;
  double affine = 0;
  auto rng = RngStream::keyed(RngPurpose::kEval, {2, 0});
  for (int t = 0; t < 500; ++t) {
    std::vector<double> rs(2 + t % 9), moved;
    for (auto& x : rs) x = rng.uniform();
    const double scale = 0.1 + 10 * rng.uniform(), shift = 20 * rng.uniform() - 10;
    for (double x : rs) moved.push_back(scale * x + shift);
    const auto base = group_advantages(rs), after = group_advantages(moved);
    for (std::size_t i = 0; i < rs.size(); ++i) affine = std::max(affine, std::abs(base[i] - after[i]));
  }
  const bool ok = err < 1e-9 && quoted < 5e-8 && zeros && affine < 1e-12;
  return {ok, fmt("[1,0,0,0] err %.1e (vs 7-dp literals %.1e); identical groups all zero: %s; affine max diff %.1e "
                  "over 500",
                  err, quoted, zeros ? "yes" : "no", affine)};
}

Verdict c3_surrogate_identity() {
  double worst_abs = 0, worst_rel = 0;
  for (int s = 0; s < 50; ++s) {
    auto cfg = tiny_policy_config(4 + s % 3);
    const auto p = PolicyParams::init(cfg, 200 + s);
    RandomGroupOptions opt;
    opt.k = 2 + s % 7;
    opt.max_length = 1 + s % 4;
    const auto g = random_group(p, 900 + s, opt);
    const auto a = grad_of(p, [&](const PolicyGraph& pg) { return surrogate_loss(pg, g, 0.2); });
    const auto b = grad_of(p, [&](const PolicyGraph& pg) { return vanilla_pg_loss(pg, g); });
    worst_rel = std::max(worst_rel, relative_error(a, b));
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < a[i].size(); ++j)
        worst_abs = std::max(worst_abs, std::abs(a[i].data[j] - b[i].data[j]));
  }
  return {worst_abs < 1e-9, fmt("50 groups; max abs grad diff %.1e, max rel %.1e", worst_abs, worst_rel)};
}

Verdict c4_dead_zone() {
  const auto p = PolicyParams::init(tiny_policy_config(), 7);
  const double eps = 0.2;
  double analytic = 0, fd = 0, live = 0;
  int cases = 0;
  for (int s = 0; s < 10; ++s) {
    for (auto [adv, ratio] : {std::pair{1.0, 1.25}, std::pair{0.4, 1.7}, std::pair{2.0, 3.0}, std::pair{-1.0, 0.75},
                              std::pair{-0.6, 0.5}, std::pair{-2.0, 0.1}}) {
      RolloutGroup g = random_group(p, 40 + s, {.k = 2, .max_length = static_cast<std::size_t>(1 + s % 3)});
      g.trajectories.resize(1);
      for (auto& lp : g.trajectories[0].logprobs) lp -= std::log(ratio);
      g.advantages = {adv};
      auto build = [&](const PolicyGraph& pg) { return surrogate_loss(pg, g, eps); };
      analytic = std::max(analytic, max_abs(grad_of(p, build)));
      auto f = [&](const std::vector<Tensor>& xs) { return value_of(with_values(p, xs), build); };
      fd = std::max(fd, max_abs(central_differences(f, values_of(p))));
      ++cases;
    }
    RolloutGroup g = random_group(p, 40 + s, {.k = 2, .max_length = 1});
    g.trajectories.resize(1);
    g.trajectories[0].logprobs[0] -= std::log(0.5);
    g.advantages = {1.0};
    live = std::max(live, max_abs(grad_of(p, [&](const PolicyGraph& pg) { return surrogate_loss(pg, g, eps); })));
  }
  const bool ok = analytic == 0.0 && fd < 1e-8 && live > 0.0;
  return {ok, fmt("%d clipped constructions; max analytic |grad| %.1e, max FD |grad| %.1e; unclipped control %.2e",
                  cases, analytic, fd, live)};
}

double expected_group_lambda(const std::string& mode, std::size_t step, bool noisy, double lmax, double lmin) {
  const bool stage_one = step <= 800;
  if (mode == "max-then-min") return stage_one ? lmax : -lmin;
  if (mode == "min-then-max") return stage_one ? -lmin : lmax;
  if (mode == "clean-max-noisy-min") return noisy ? -lmin : lmax;
  if (mode == "noisy-max-clean-min") return noisy ? lmax : -lmin;
  throw std::logic_error(mode);
}

Verdict c5_schedule() {
  json j = toy_json();
  j["schedule"] = {{"mode", "max-then-min"}, {"lambda_max", 0.01}, {"lambda_min", 0.01}, {"switch_step", 800}};
  j["steps"] = 1000;
  j["eval"]["every"] = 0;
  std::map<std::string, std::vector<double>> traces;
  std::vector<std::string> problems;
  std::size_t plus = 0, minus = 0;
  bool exact = true;
  for (const std::string mode : {"max-then-min", "min-then-max", "clean-max-noisy-min", "noisy-max-clean-min"}) {
    j["schedule"]["mode"] = mode;
    const auto dir = scratch("c5-" + mode);
    train(config_from_json(j), dir, quiet());
    std::ifstream in(dir / "metrics.jsonl");
    std::string line;
    std::size_t step = 0;
    while (std::getline(in, line)) {
      const json r = json::parse(line);
      ++step;
      if (r.at("step") != step) problems.push_back(mode + ": step index");
      for (const auto& g : r.at("groups")) {
        const double lam = g.at("lambda").get<double>();
        if (lam != expected_group_lambda(mode, step, g.at("is_noisy").get<bool>(), 0.01, 0.01))
          problems.push_back(mode + fmt(": group lambda at step %zu", step));
        traces[mode].push_back(lam);
      }
      if (mode == "max-then-min") {
        const double lam = r.at("lambda").get<double>();
        if (step <= 800) {
          exact = exact && lam == 0.01;
          plus += lam == 0.01;
        } else {
          exact = exact && lam == -0.01;
          minus += lam == -0.01;
        }
      }
    }
    if (step != 1000) problems.push_back(mode + ": wrong record count");
    fs::remove_all(dir);
  }
  bool distinct = true;
  for (auto a = traces.begin(); a != traces.end(); ++a)
    for (auto b = std::next(a); b != traces.end(); ++b) distinct = distinct && a->second != b->second;
  const bool ok = exact && plus == 800 && minus == 200 && problems.empty() && distinct;
  std::string detail = fmt("max-then-min: %zu x +0.01 then %zu x -0.01; per-group traces of 4 modes %s, %s", plus,
                           minus, problems.empty() ? "match" : "MISMATCH", distinct ? "pairwise distinct" : "NOT distinct");
  if (!problems.empty()) detail += " (first: " + problems.front() + ")";
  return {ok, detail};
}

Verdict c6_entropy_dynamics() {
  json j = toy_json();
  j["dataset"]["noise_rate"] = 1.0;
  j["steps"] = 1000;
  j["group_size"] = 8;
  j["schedule"]["mode"] = "max-then-min";
  j["schedule"]["switch_step"] = 800;
  j["eval"]["every"] = 0;
  int passed = 0;
  double slowest = 0;
  std::string per_seed;
  for (int seed = 1; seed <= 5; ++seed) {
    j["seed"] = seed;
    const auto t0 = std::chrono::steady_clock::now();
    const auto dir = scratch(fmt("c6-%d", seed));
    const auto r = train(config_from_json(j), dir, quiet());
    slowest = std::max(slowest, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    std::vector<double> h;
    for (const auto& m : r.metrics) h.push_back(m.h_token);
    auto mean = [&](std::size_t b, std::size_t e) {
      double s = 0;
      for (std::size_t i = b; i < e; ++i) s += h[i];
      return s / static_cast<double>(e - b);
    };
    // steps 701-800 against steps 1-50; last 50 against the best 50-step window of stage one
    const double rise = mean(700, 800) / mean(0, 50);
    double peak = 0;
    for (std::size_t end = 50; end <= 800; ++end) peak = std::max(peak, mean(end - 50, end));
    const double fall = mean(950, 1000) / peak;
    const bool ok = rise >= 1.3 && fall <= 0.6;
    passed += ok;
    per_seed += fmt(" s%d %.2f/%.2f%s", seed, rise, fall, ok ? "" : "x");
    fs::remove_all(dir);
  }
  return {passed >= 4 && slowest < 900,
          fmt("%d/5 seeds pass (rise/fall:%s); slowest run %.1fs", passed, per_seed.c_str(), slowest)};
}

Verdict c7_noise_ordering() {
  json j = toy_json();
  j["eval"]["every"] = 0;
  auto run = [&](const std::string& mode, double noise, int seed) {
    j["schedule"]["mode"] = mode;
    j["dataset"]["noise_rate"] = noise;
    j["seed"] = seed;
    const auto dir = scratch("c7");
    const auto r = train(config_from_json(j), dir, quiet());
    fs::remove_all(dir);
    return r;
  };
  const int noisy_seeds = 10, clean_seeds = 5;
  double grpo = 0, two = 0;
  for (int s = 1; s <= noisy_seeds; ++s) {
    grpo += run("off", 0.5, s).final_acc / noisy_seeds;
    two += run("max-then-min", 0.5, s).final_acc / noisy_seeds;
  }
  const bool robust = two >= grpo - 0.01;

  std::string clean;
  bool improved = true;
  double base = 0;
  for (const std::string mode : {"off", "constant-min", "constant-max", "max-then-min"}) {
    double acc = 0, init = 0;
    for (int s = 1; s <= clean_seeds; ++s) {
      const auto r = run(mode, 0.0, s);
      acc += r.final_acc / clean_seeds;
      init += r.initial_acc / clean_seeds;
    }
    base = init;
    improved = improved && acc >= init + 0.05;
    clean += fmt(" %s %.3f", mode.c_str(), acc);
  }
  return {robust && improved,
          fmt("50%% noise (%d seeds): max-then-min %.4f vs grpo %.4f; 0%% noise (%d seeds) vs untrained %.3f:%s",
              noisy_seeds, two, grpo, clean_seeds, base, clean.c_str())};
}

Verdict c8_self_gating() {
  json j = toy_json();
  j["steps"] = 100;
  j["schedule"] = {{"mode", "off"}};
  j["optimizer"]["weight_decay"] = 0.0;
  j["eval"]["every"] = 0;
  TrainOptions opt = quiet();
  opt.reward_override = [](const Sample&, const Trajectory&) { return 1.0; };
  const auto dir = scratch("c8");
  const auto r = train(config_from_json(j), dir, opt);
  double drift = 0;
  for (std::size_t i = 0; i < r.initial_params.tensors.size(); ++i) {
    const auto& a = r.initial_params.tensors[i].value.data;
    const auto& b = r.final_params.tensors[i].value.data;
    for (std::size_t k = 0; k < a.size(); ++k) drift = std::max(drift, std::abs(a[k] - b[k]));
  }

  j["optimizer"]["weight_decay"] = 0.01;
  const auto c = config_from_json(j);
  const auto rd = train(c, dir, opt);
  const double factor = std::pow(1.0 - c.optimizer.lr * c.optimizer.weight_decay, 100.0);
  double decay_err = 0;
  for (std::size_t i = 0; i < rd.initial_params.tensors.size(); ++i) {
    const auto& a = rd.initial_params.tensors[i].value.data;
    const auto& b = rd.final_params.tensors[i].value.data;
    for (std::size_t k = 0; k < a.size(); ++k) decay_err = std::max(decay_err, std::abs(b[k] - a[k] * factor));
  }
  fs::remove_all(dir);
  return {drift < 1e-12 && decay_err < 1e-12,
          fmt("100 steps, constant reward: max |param change| %.1e at wd=0; deviation from pure decay at wd=0.01 %.1e",
              drift, decay_err)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Verdict c9_determinism() {
  const auto c = config_from_json(toy_json());
  const auto a = scratch("c9-a"), b = scratch("c9-b");
  train(c, a, quiet());
  train(c, b, quiet());
  const std::string x = slurp(a / "metrics.jsonl"), y = slurp(b / "metrics.jsonl");
  fs::remove_all(a);
  fs::remove_all(b);
  return {!x.empty() && x == y, fmt("two toy runs: %zu and %zu bytes, %s", x.size(), y.size(),
                                    x == y ? "identical" : "DIFFERENT")};
}

Verdict c10_replay() {
  json j = toy_json();
  double worst = 0;
  std::size_t records = 0;
  for (const std::string mode : {"max-then-min", "min-then-max", "clean-max-noisy-min", "noisy-max-clean-min",
                                 "constant-max", "constant-min", "off", "linear-decay"}) {
    j["schedule"]["mode"] = mode;
    const auto dir = scratch("c10");
    train(config_from_json(j), dir, quiet());
    std::ifstream in(dir / "metrics.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      const json r = json::parse(line);
      const double lt = r.at("l_total"), lg = r.at("l_grpo"), le = r.at("l_entropy"), lam = r.at("lambda");
      worst = std::max(worst, std::abs(lt - (lg + lam * le)));
      ++records;
    }
    fs::remove_all(dir);
  }
  return {records == 8000 && worst <= 1e-12,
          fmt("%zu records over 8 modes; max |L_total - (L_GRPO + lambda L_entropy)| %.1e", records, worst)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, Verdict (*)()>> criteria = {
      {"gradient oracle", c1_gradient_oracle},     {"advantages", c2_advantages},
      {"surrogate identity", c3_surrogate_identity}, {"clipping dead zone", c4_dead_zone},
      {"schedule exactness", c5_schedule},         {"entropy dynamics", c6_entropy_dynamics},
      {"noise robustness", c7_noise_ordering},     {"self-gating", c8_self_gating},
      {"determinism", c9_determinism},             {"log self-consistency", c10_replay},
  };
  std::vector<std::size_t> selected;
  for (int i = 1; i < argc; ++i) {
    const long n = std::strtol(argv[i], nullptr, 10);
    if (n < 1 || n > static_cast<long>(criteria.size())) {
      std::fprintf(stderr, "usage: %s [criterion 1-%zu ...]\n", argv[0], criteria.size());
      return 2;
    }
    selected.push_back(static_cast<std::size_t>(n));
  }
  if (selected.empty())
    for (std::size_t n = 1; n <= criteria.size(); ++n) selected.push_back(n);

  bool all = true;
  for (std::size_t n : selected) {
    const auto& [name, check] = criteria[n - 1];
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s criterion %zu (%s): %s [%.1fs]\n", v.pass ? "PASS" : "FAIL", n, name, v.detail.c_str(), secs);
    std::fflush(stdout);
    all = all && v.pass;
  }
  return all ? 0 : 1;
}
