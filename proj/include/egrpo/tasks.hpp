#pragma once

// Synthetic verifiable tasks and their reward functions.
//
// Vocabulary layout (id 0 is always EOS):
//   grid-ground: 1 = task marker, [2, 2+R) row tokens, [2+R, 2+R+C) column tokens
//   classify:    1 = task marker, [2, 2+L) label tokens, [2+L, 2+L+F) feature tokens
//
// A grid-ground prompt is [marker, row(top), col(left), row(bottom), col(right)]
// describing the true box; the answer grammar is `row col [EOS]`.
// A classify prompt is [marker, f_1 .. f_n], the class prototype with each
// feature independently resampled with probability feature_noise; the answer
// grammar is `label [EOS]`.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "egrpo/policy.hpp"
#include "egrpo/rng.hpp"
#include "egrpo/types.hpp"

namespace egrpo {

enum class TaskKind { kGridGround, kClassify };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);

struct TaskParams {
  TaskKind kind = TaskKind::kGridGround;
  int grid_rows = 10;
  int grid_cols = 10;
  int box_rows = 3;
  int box_cols = 3;
  int num_labels = 8;
  int num_features = 24;
  int features_per_prompt = 3;
  double feature_noise = 0.2;
  // Seeds the class prototypes; shared by every dataset of the same task.
  std::uint64_t prototype_seed = 0;

  bool operator==(const TaskParams&) const = default;
};

// Throws std::invalid_argument for inconsistent parameters.
void validate(const TaskParams& task);
std::size_t vocab_size(const TaskParams& task);
// Generation budget: answer tokens plus EOS.
std::size_t response_length(const TaskParams& task);

nlohmann::ordered_json to_json(const TaskParams& task);
TaskParams task_params_from_json(const nlohmann::ordered_json& j);

// Inclusive cell ranges.
struct Box {
  int top = 0;
  int left = 0;
  int bottom = 0;
  int right = 0;

  int rows() const { return bottom - top + 1; }
  int cols() const { return right - left + 1; }
  bool contains(Point p) const { return p.row >= top && p.row <= bottom && p.col >= left && p.col <= right; }
  bool operator==(const Box&) const = default;
};

int intersection_area(const Box& a, const Box& b);

using Target = std::variant<Box, Label>;

struct Sample {
  std::size_t id = 0;
  TaskKind kind = TaskKind::kGridGround;
  std::vector<Token> prompt;
  Target true_target;
  Target train_target;
  bool is_noisy = false;
};

struct Dataset {
  TaskParams task;
  std::vector<Sample> samples;
  double noise_rate = 0.0;
  std::uint64_t seed = 0;

  std::size_t size() const { return samples.size(); }
  std::size_t noisy_count() const;
};

// Exactly round(noise_rate * size) samples are corrupted; deterministic in seed.
Dataset make_dataset(const TaskParams& task, std::size_t size, double noise_rate, std::uint64_t seed);

// All same-size placements of `box` inside the grid that do not intersect it.
std::vector<Box> disjoint_placements(const Box& box, int grid_rows, int grid_cols);

// Uniform over disjoint_placements; throws std::runtime_error when none exist.
Box noisy_box(const Box& true_box, int grid_rows, int grid_cols, RngStream& rng);

// Label drawn uniformly from the other num_labels - 1 labels.
Label noisy_label(Label true_label, int num_labels, RngStream& rng);

// Class prototype feature tokens for a label.
std::vector<Token> class_prototype(const TaskParams& task, int label);

std::vector<Token> encode_answer(const TaskParams& task, const Answer& answer);
// Returns nullopt unless the tokens follow the task grammar.
std::optional<Answer> parse_answer(const TaskParams& task, std::span<const Token> tokens);

double verify_grounding(const std::optional<Answer>& answer, const Box& target);
double verify_label(const std::optional<Answer>& answer, Label target);
// Dispatches on the target type.
double verify(const std::optional<Answer>& answer, const Target& target);

enum class SpuriousKind { kRandom, kFormat };
double spurious_reward(SpuriousKind kind, const Trajectory& trajectory, RngStream& rng);

// Pseudo-label = modal parsed answer (unparsable excluded, ties to the smallest
// answer); reward 1 for matching responses.
std::vector<double> majority_vote_reward(std::span<const std::optional<Answer>> answers);

// JSONL, one sample per line with fields in canonical order
// (id, task, prompt_tokens, true_target, train_target, is_noisy), plus a
// sidecar <path>.meta.json holding the task parameters, noise rate and seed.
void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& path);
std::string sample_line(const Sample& sample);
std::filesystem::path meta_path(const std::filesystem::path& dataset_path);

}  // namespace egrpo
