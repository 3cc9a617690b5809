#include "egrpo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace egrpo {

void validate(const PolicyConfig& c) {
  if (c.vocab_size < 2) throw std::invalid_argument("policy: vocab_size must be at least 2");
  if (c.context_window == 0) throw std::invalid_argument("policy: context_window must be positive");
  if (c.embed_dim == 0 || c.hidden_dim == 0) throw std::invalid_argument("policy: dims must be positive");
  if (!std::isfinite(c.embed_init) || !std::isfinite(c.head_init) || c.embed_init < 0 || c.head_init < 0) {
    throw std::invalid_argument("policy: init scales must be finite and non-negative");
  }
}

std::size_t parameter_count(const PolicyConfig& c) {
  std::size_t n = c.vocab_size * c.embed_dim + c.context_window * c.embed_dim;
  std::size_t in = c.embed_dim;
  for (std::size_t l = 0; l < c.layers; ++l) {
    n += in * c.hidden_dim + c.hidden_dim;
    in = c.hidden_dim;
  }
  return n + in * c.vocab_size + c.vocab_size;
}

PolicyParams PolicyParams::init(const PolicyConfig& config, std::uint64_t seed) {
  validate(config);
  PolicyParams p;
  p.config = config;
  auto rng = RngStream::keyed(RngPurpose::kInit, {seed});
  auto normal = [&rng](Shape shape, double stddev) {
    Tensor t = Tensor::zeros(std::move(shape));
    if (stddev > 0.0)
      for (auto& x : t.data) x = rng.normal() * stddev;
    return t;
  };
  const auto& c = config;
  p.tensors.push_back({"tok_embed", normal({c.vocab_size, c.embed_dim}, c.embed_init)});
  p.tensors.push_back({"pos_embed", normal({c.context_window, c.embed_dim}, c.embed_init)});
  std::size_t in = c.embed_dim;
  for (std::size_t l = 0; l < c.layers; ++l) {
    const auto prefix = "block" + std::to_string(l);
    p.tensors.push_back({prefix + ".weight", normal({in, c.hidden_dim}, 1.0 / std::sqrt(double(in)))});
    p.tensors.push_back({prefix + ".bias", Tensor::zeros({1, c.hidden_dim})});
    in = c.hidden_dim;
  }
  p.tensors.push_back({"head.weight", normal({in, c.vocab_size}, c.head_init / std::sqrt(double(in)))});
  p.tensors.push_back({"head.bias", Tensor::zeros({1, c.vocab_size})});
  return p;
}

std::size_t PolicyParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.value.size();
  return n;
}

const Tensor& PolicyParams::at(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.value;
  throw std::out_of_range("policy: no tensor named " + std::string(name));
}

Tensor& PolicyParams::at(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).at(name));
}

double Trajectory::mean_entropy() const {
  if (entropies.empty()) throw std::invalid_argument("trajectory: empty");
  double s = 0.0;
  for (double h : entropies) s += h;
  return s / static_cast<double>(entropies.size());
}

PolicyGraph::PolicyGraph(Tape& tape, const PolicyParams& params) : tape_(&tape), params_(&params) {
  leaves_.reserve(params.tensors.size());
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const auto& nt = params.tensors[i];
    leaves_.push_back(tape.leaf(nt.value));
    if (nt.name == "tok_embed") tok_ = i;
    else if (nt.name == "pos_embed") pos_ = i;
    else if (nt.name == "head.weight") head_w_ = i;
    else if (nt.name == "head.bias") head_b_ = i;
    else if (nt.name.ends_with(".weight")) block_weight_.push_back(i);
  }
  if (block_weight_.size() != params.config.layers) {
    throw std::invalid_argument("policy: parameter set does not match layer count");
  }
}

Value PolicyGraph::logits(std::span<const Token> prompt, std::span<const Token> prefix) const {
  const auto& c = params_->config;
  const std::size_t total = prompt.size() + prefix.size();
  if (total == 0) throw std::invalid_argument("policy: empty context");
  const std::size_t n = std::min(total, c.context_window);
  std::vector<std::size_t> ids(n), positions(n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = total - n + j;
    const Token t = src < prompt.size() ? prompt[src] : prefix[src - prompt.size()];
    if (t >= c.vocab_size) {
      throw std::out_of_range("policy: token id " + std::to_string(t) + " out of range for vocab " +
                              std::to_string(c.vocab_size));
    }
    ids[j] = t;
    positions[j] = n - 1 - j;
  }
  Value x = mean_rows(gather_rows(leaves_[tok_], ids) + gather_rows(leaves_[pos_], positions));
  for (auto w : block_weight_) x = tanh(matmul(x, leaves_[w]) + leaves_[w + 1]);
  return matmul(x, leaves_[head_w_]) + leaves_[head_b_];
}

Value token_entropy(const Value& logits) {
  const Value lp = log_softmax(logits);
  return scale(sum(softmax(logits) * lp), -1.0);
}

PolicyGraph::Step PolicyGraph::step(std::span<const Token> prompt, std::span<const Token> prefix,
                                    Token token) const {
  const Value z = logits(prompt, prefix);
  const Value lp = log_softmax(z);
  const Value h = scale(sum(softmax(z) * lp), -1.0);
  return {pick(lp, token), h};
}

std::vector<PolicyGraph::Step> PolicyGraph::steps(std::span<const Token> prompt,
                                                  std::span<const Token> tokens) const {
  std::vector<Step> out;
  out.reserve(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) out.push_back(step(prompt, tokens.first(t), tokens[t]));
  return out;
}

std::vector<Tensor> PolicyGraph::gradients() const {
  std::vector<Tensor> out;
  out.reserve(leaves_.size());
  for (const auto& v : leaves_) {
    const auto g = v.grad();
    out.emplace_back(v.shape(), std::vector<double>(g.begin(), g.end()));
  }
  return out;
}

Tensor logits(const PolicyParams& params, std::span<const Token> prompt, std::span<const Token> prefix) {
  Tape tape(false);
  PolicyGraph g(tape, params);
  return g.logits(prompt, prefix).tensor();
}

Trajectory sample_response(const PolicyParams& params, std::span<const Token> prompt,
                           std::size_t max_length, RngStream& rng) {
  if (max_length == 0) throw std::invalid_argument("sample_response: max_length must be at least 1");
  Tape tape(false);
  PolicyGraph g(tape, params);
  Trajectory tr;
  tr.prompt.assign(prompt.begin(), prompt.end());
  while (true) {
    const Value z = g.logits(prompt, tr.tokens);
    const Value lp = log_softmax(z);
    const Value p = softmax(z);
    const Value h = scale(sum(p * lp), -1.0);
    const auto probs = p.data();
    const double u = rng.uniform();
    double acc = 0.0;
    Token chosen = static_cast<Token>(probs.size() - 1);
    for (std::size_t v = 0; v < probs.size(); ++v) {
      acc += probs[v];
      if (u < acc) {
        chosen = static_cast<Token>(v);
        break;
      }
    }
    // Guard against landing on a zero-probability tail id through rounding.
    while (probs[chosen] == 0.0 && chosen > 0) --chosen;
    tr.tokens.push_back(chosen);
    tr.logprobs.push_back(lp.data()[chosen]);
    tr.entropies.push_back(h.item());
    if (chosen == kEos) {
      tr.terminated_by = Termination::kEos;
      break;
    }
    if (tr.tokens.size() >= max_length) {
      tr.terminated_by = Termination::kMaxLength;
      break;
    }
  }
  return tr;
}

std::vector<Token> greedy_response(const PolicyParams& params, std::span<const Token> prompt,
                                   std::size_t max_length) {
  if (max_length == 0) throw std::invalid_argument("greedy_response: max_length must be at least 1");
  Tape tape(false);
  PolicyGraph g(tape, params);
  std::vector<Token> out;
  while (out.size() < max_length) {
    const auto z = g.logits(prompt, out).data();
    const auto best = std::max_element(z.begin(), z.end()) - z.begin();
    out.push_back(static_cast<Token>(best));
    if (out.back() == kEos) break;
  }
  return out;
}

double token_entropy(std::span<const double> probs) {
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw std::invalid_argument("token_entropy: negative or non-finite probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("token_entropy: probabilities do not sum to 1");
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

Value sequence_entropy(const PolicyGraph& graph, const Trajectory& trajectory) {
  if (trajectory.tokens.empty()) throw std::invalid_argument("sequence_entropy: empty trajectory");
  std::vector<Value> hs;
  hs.reserve(trajectory.tokens.size());
  for (const auto& s : graph.steps(trajectory.prompt, trajectory.tokens)) hs.push_back(s.entropy);
  return mean(concat(hs));
}

double sequence_entropy(const Trajectory& trajectory, const PolicyParams& params) {
  Tape tape(false);
  PolicyGraph g(tape, params);
  return sequence_entropy(g, trajectory).item();
}

nlohmann::ordered_json checkpoint_json(const PolicyParams& params, const nlohmann::ordered_json& meta) {
  const auto& c = params.config;
  nlohmann::ordered_json j;
  j["version"] = "1";
  j["config"] = {{"vocab_size", c.vocab_size}, {"context_window", c.context_window},
                 {"embed_dim", c.embed_dim},   {"hidden_dim", c.hidden_dim},
                 {"layers", c.layers},         {"embed_init", c.embed_init},
                 {"head_init", c.head_init}};
  auto tensors = nlohmann::ordered_json::array();
  for (const auto& t : params.tensors) {
    tensors.push_back({{"name", t.name}, {"shape", t.value.shape}, {"data", t.value.data}});
  }
  j["tensors"] = std::move(tensors);
  j["meta"] = meta;
  return j;
}

PolicyParams params_from_checkpoint(const nlohmann::ordered_json& j) {
  if (!j.contains("version") || j.at("version") != "1") {
    throw std::runtime_error("checkpoint: unsupported or missing version");
  }
  const auto& jc = j.at("config");
  PolicyConfig c;
  c.vocab_size = jc.at("vocab_size").get<std::size_t>();
  c.context_window = jc.at("context_window").get<std::size_t>();
  c.embed_dim = jc.at("embed_dim").get<std::size_t>();
  c.hidden_dim = jc.at("hidden_dim").get<std::size_t>();
  c.layers = jc.at("layers").get<std::size_t>();
  c.embed_init = jc.at("embed_init").get<double>();
  c.head_init = jc.at("head_init").get<double>();
  // Start from a correctly shaped set, then overwrite every tensor by name.
  PolicyParams p = PolicyParams::init(c, 0);
  const auto& jt = j.at("tensors");
  if (jt.size() != p.tensors.size()) throw std::runtime_error("checkpoint: tensor count mismatch");
  for (const auto& e : jt) {
    auto& dst = p.at(e.at("name").get<std::string>());
    Tensor src(e.at("shape").get<Shape>(), e.at("data").get<std::vector<double>>());
    if (src.shape != dst.shape) throw std::runtime_error("checkpoint: shape mismatch for " + e.at("name").get<std::string>());
    dst = std::move(src);
  }
  return p;
}

void save_checkpoint(const std::filesystem::path& path, const PolicyParams& params,
                     const nlohmann::ordered_json& meta) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << checkpoint_json(params, meta).dump() << '\n';
}

std::pair<PolicyParams, nlohmann::ordered_json> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  const auto j = nlohmann::ordered_json::parse(in);
  return {params_from_checkpoint(j), j.value("meta", nlohmann::ordered_json::object())};
}

}  // namespace egrpo
