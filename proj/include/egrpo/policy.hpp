#pragma once

// Small autoregressive categorical policy.
//
// Context = last `context_window` tokens of prompt ++ prefix. Each context
// token contributes token_embedding + position_embedding (position counted
// from the end of the window); the rows are mean-pooled and passed through
// `layers` tanh feedforward blocks and a linear output head over the vocabulary.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "egrpo/rng.hpp"
#include "egrpo/tensor.hpp"
#include "egrpo/types.hpp"

namespace egrpo {

struct PolicyConfig {
  std::size_t vocab_size = 0;
  std::size_t context_window = 8;
  std::size_t embed_dim = 16;
  std::size_t hidden_dim = 32;
  std::size_t layers = 2;
  // Standard deviation of embedding init; hidden weights use 1/sqrt(fan_in).
  double embed_init = 0.5;
  // Output head weight std (times 1/sqrt(hidden_dim)); 0 gives a uniform policy.
  double head_init = 1.0;

  bool operator==(const PolicyConfig&) const = default;
};

void validate(const PolicyConfig& config);
std::size_t parameter_count(const PolicyConfig& config);

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct PolicyParams {
  PolicyConfig config;
  std::vector<NamedTensor> tensors;

  static PolicyParams init(const PolicyConfig& config, std::uint64_t seed);

  std::size_t parameter_count() const;
  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);
};

enum class Termination { kEos, kMaxLength };

struct Trajectory {
  std::vector<Token> prompt;
  std::vector<Token> tokens;
  // log pi(y_t | x, y_<t) at sampling time; the old-policy record.
  std::vector<double> logprobs;
  std::vector<double> entropies;
  Termination terminated_by = Termination::kMaxLength;
  std::optional<Answer> answer;

  std::size_t length() const { return tokens.size(); }
  // Mean of the recorded per-token entropies.
  double mean_entropy() const;
};

// Binds a parameter set to a tape as leaves so that any number of forward
// passes can share them.
class PolicyGraph {
 public:
  PolicyGraph(Tape& tape, const PolicyParams& params);

  Tape& tape() const { return *tape_; }
  const PolicyConfig& config() const { return params_->config; }

  // Logits of shape [1, vocab].
  Value logits(std::span<const Token> prompt, std::span<const Token> prefix) const;

  struct Step {
    Value logprob;  // log pi(token | context), scalar
    Value entropy;  // H_t of the next-token distribution, scalar
  };
  Step step(std::span<const Token> prompt, std::span<const Token> prefix, Token token) const;

  // Teacher-forced per-token values for a generated sequence.
  std::vector<Step> steps(std::span<const Token> prompt, std::span<const Token> tokens) const;

  // Gradient buffers, in parameter order, after a backward pass.
  std::vector<Tensor> gradients() const;
  const std::vector<Value>& leaves() const { return leaves_; }

 private:
  Tape* tape_;
  const PolicyParams* params_;
  std::vector<Value> leaves_;
  std::vector<std::size_t> block_weight_;
  std::size_t tok_ = 0, pos_ = 0, head_w_ = 0, head_b_ = 0;
};

// Convenience forward on a throwaway no-grad tape.
Tensor logits(const PolicyParams& params, std::span<const Token> prompt, std::span<const Token> prefix);

// Temperature-1 sampling until EOS or max_length tokens.
Trajectory sample_response(const PolicyParams& params, std::span<const Token> prompt,
                           std::size_t max_length, RngStream& rng);

// Greedy argmax decoding (lowest id wins ties).
std::vector<Token> greedy_response(const PolicyParams& params, std::span<const Token> prompt,
                                   std::size_t max_length);

// -sum p log p with 0 log 0 := 0. Throws if probs are negative or do not sum
// to 1 within 1e-9.
double token_entropy(std::span<const double> probs);

// Differentiable H_t from logits via p * log_softmax.
Value token_entropy(const Value& logits);

// H_token = (1/T) sum_t H_t under the graph's parameters (teacher forcing).
Value sequence_entropy(const PolicyGraph& graph, const Trajectory& trajectory);
double sequence_entropy(const Trajectory& trajectory, const PolicyParams& params);

// Checkpoint: {"version": "1", "config": {...}, "tensors": [{name, shape, data}], "meta": {...}}
nlohmann::ordered_json checkpoint_json(const PolicyParams& params,
                                       const nlohmann::ordered_json& meta = nlohmann::ordered_json::object());
PolicyParams params_from_checkpoint(const nlohmann::ordered_json& j);
void save_checkpoint(const std::filesystem::path& path, const PolicyParams& params,
                     const nlohmann::ordered_json& meta = nlohmann::ordered_json::object());
// Returns params and the meta block.
std::pair<PolicyParams, nlohmann::ordered_json> load_checkpoint(const std::filesystem::path& path);

}  // namespace egrpo
