#include "egrpo/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

namespace egrpo {

namespace {

constexpr Token kMarker = 1;
constexpr Token kFirstSpecific = 2;
// Salt for keyed streams that are not per-sample.
constexpr std::uint64_t kNoiseSelection = 0xFFFF'FFFF'0000'0001ULL;
constexpr std::uint64_t kPrototype = 0xFFFF'FFFF'0000'0002ULL;

Token row_token(int r) { return kFirstSpecific + static_cast<Token>(r); }
Token col_token(const TaskParams& t, int c) { return kFirstSpecific + static_cast<Token>(t.grid_rows + c); }
Token label_token(int l) { return kFirstSpecific + static_cast<Token>(l); }
Token feature_token(const TaskParams& t, int f) {
  return kFirstSpecific + static_cast<Token>(t.num_labels + f);
}

}  // namespace

std::string to_string(TaskKind kind) {
  return kind == TaskKind::kGridGround ? "grid-ground" : "classify";
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "grid-ground") return TaskKind::kGridGround;
  if (s == "classify") return TaskKind::kClassify;
  throw std::invalid_argument("unknown task kind '" + s + "'");
}

void validate(const TaskParams& t) {
  if (t.kind == TaskKind::kGridGround) {
    if (t.grid_rows < 1 || t.grid_cols < 1) throw std::invalid_argument("grid dimensions must be positive");
    if (t.box_rows < 1 || t.box_cols < 1) throw std::invalid_argument("box dimensions must be positive");
    if (t.box_rows > t.grid_rows || t.box_cols > t.grid_cols) {
      throw std::invalid_argument("box " + std::to_string(t.box_rows) + "x" + std::to_string(t.box_cols) +
                                  " does not fit in grid " + std::to_string(t.grid_rows) + "x" +
                                  std::to_string(t.grid_cols));
    }
  } else {
    if (t.num_labels < 2) throw std::invalid_argument("classify needs at least 2 labels");
    if (t.features_per_prompt < 1 || t.features_per_prompt > t.num_features) {
      throw std::invalid_argument("features_per_prompt must be in [1, num_features]");
    }
    if (!(t.feature_noise >= 0.0 && t.feature_noise <= 1.0)) {
      throw std::invalid_argument("feature_noise must be in [0, 1]");
    }
  }
}

std::size_t vocab_size(const TaskParams& t) {
  if (t.kind == TaskKind::kGridGround) return kFirstSpecific + static_cast<std::size_t>(t.grid_rows + t.grid_cols);
  return kFirstSpecific + static_cast<std::size_t>(t.num_labels + t.num_features);
}

std::size_t response_length(const TaskParams& t) { return t.kind == TaskKind::kGridGround ? 3 : 2; }

nlohmann::ordered_json to_json(const TaskParams& t) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(t.kind);
  if (t.kind == TaskKind::kGridGround) {
    j["grid_rows"] = t.grid_rows;
    j["grid_cols"] = t.grid_cols;
    j["box_rows"] = t.box_rows;
    j["box_cols"] = t.box_cols;
  } else {
    j["num_labels"] = t.num_labels;
    j["num_features"] = t.num_features;
    j["features_per_prompt"] = t.features_per_prompt;
    j["feature_noise"] = t.feature_noise;
    j["prototype_seed"] = t.prototype_seed;
  }
  return j;
}

TaskParams task_params_from_json(const nlohmann::ordered_json& j) {
  TaskParams t;
  t.kind = task_kind_from_string(j.at("kind").get<std::string>());
  t.grid_rows = j.value("grid_rows", t.grid_rows);
  t.grid_cols = j.value("grid_cols", t.grid_cols);
  t.box_rows = j.value("box_rows", t.box_rows);
  t.box_cols = j.value("box_cols", t.box_cols);
  t.num_labels = j.value("num_labels", t.num_labels);
  t.num_features = j.value("num_features", t.num_features);
  t.features_per_prompt = j.value("features_per_prompt", t.features_per_prompt);
  t.feature_noise = j.value("feature_noise", t.feature_noise);
  t.prototype_seed = j.value("prototype_seed", t.prototype_seed);
  validate(t);
  return t;
}

int intersection_area(const Box& a, const Box& b) {
  const int rows = std::min(a.bottom, b.bottom) - std::max(a.top, b.top) + 1;
  const int cols = std::min(a.right, b.right) - std::max(a.left, b.left) + 1;
  return rows > 0 && cols > 0 ? rows * cols : 0;
}

std::size_t Dataset::noisy_count() const {
  return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(), [](const Sample& s) { return s.is_noisy; }));
}

std::vector<Box> disjoint_placements(const Box& box, int grid_rows, int grid_cols) {
  std::vector<Box> out;
  const int h = box.rows(), w = box.cols();
  for (int r = 0; r + h <= grid_rows; ++r)
    for (int c = 0; c + w <= grid_cols; ++c) {
      const Box cand{r, c, r + h - 1, c + w - 1};
      if (intersection_area(cand, box) == 0) out.push_back(cand);
    }
  return out;
}

Box noisy_box(const Box& true_box, int grid_rows, int grid_cols, RngStream& rng) {
  const auto options = disjoint_placements(true_box, grid_rows, grid_cols);
  if (options.empty()) {
    throw std::runtime_error("noisy_box: no non-overlapping " + std::to_string(true_box.rows()) + "x" +
                             std::to_string(true_box.cols()) + " placement exists in a " +
                             std::to_string(grid_rows) + "x" + std::to_string(grid_cols) + " grid");
  }
  return options[rng.below(options.size())];
}

Label noisy_label(Label true_label, int num_labels, RngStream& rng) {
  if (num_labels < 2) throw std::invalid_argument("noisy_label: need at least 2 labels");
  int pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_labels - 1)));
  if (pick >= true_label.id) ++pick;
  return Label{pick};
}

std::vector<Token> class_prototype(const TaskParams& t, int label) {
  auto rng = RngStream::keyed(RngPurpose::kDataset, {t.prototype_seed, kPrototype, static_cast<std::uint64_t>(label)});
  std::vector<int> features(static_cast<std::size_t>(t.num_features));
  std::iota(features.begin(), features.end(), 0);
  rng.shuffle(std::span<int>(features));
  std::vector<Token> out;
  for (int i = 0; i < t.features_per_prompt; ++i) out.push_back(feature_token(t, features[static_cast<std::size_t>(i)]));
  return out;
}

Dataset make_dataset(const TaskParams& task, std::size_t size, double noise_rate, std::uint64_t seed) {
  validate(task);
  if (size == 0) throw std::invalid_argument("make_dataset: size must be at least 1");
  if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) throw std::invalid_argument("make_dataset: noise rate must be in [0, 1]");

  Dataset ds;
  ds.task = task;
  ds.noise_rate = noise_rate;
  ds.seed = seed;
  ds.samples.resize(size);

  std::vector<std::vector<Token>> prototypes;
  if (task.kind == TaskKind::kClassify)
    for (int l = 0; l < task.num_labels; ++l) prototypes.push_back(class_prototype(task, l));

  for (std::size_t i = 0; i < size; ++i) {
    auto rng = RngStream::keyed(RngPurpose::kDataset, {seed, i});
    Sample& s = ds.samples[i];
    s.id = i;
    s.kind = task.kind;
    if (task.kind == TaskKind::kGridGround) {
      const int top = static_cast<int>(rng.below(static_cast<std::uint64_t>(task.grid_rows - task.box_rows + 1)));
      const int left = static_cast<int>(rng.below(static_cast<std::uint64_t>(task.grid_cols - task.box_cols + 1)));
      const Box box{top, left, top + task.box_rows - 1, left + task.box_cols - 1};
      s.prompt = {kMarker, row_token(box.top), col_token(task, box.left), row_token(box.bottom),
                  col_token(task, box.right)};
      s.true_target = box;
    } else {
      const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(task.num_labels)));
      s.prompt = {kMarker};
      for (Token f : prototypes[static_cast<std::size_t>(label)]) {
        if (rng.bernoulli(task.feature_noise)) {
          f = feature_token(task, static_cast<int>(rng.below(static_cast<std::uint64_t>(task.num_features))));
        }
        s.prompt.push_back(f);
      }
      s.true_target = Label{label};
    }
    s.train_target = s.true_target;
  }

  const auto noisy = static_cast<std::size_t>(std::llround(noise_rate * static_cast<double>(size)));
  std::vector<std::size_t> order(size);
  std::iota(order.begin(), order.end(), 0);
  auto pick_rng = RngStream::keyed(RngPurpose::kDataset, {seed, kNoiseSelection});
  pick_rng.shuffle(std::span<std::size_t>(order));
  for (std::size_t k = 0; k < noisy; ++k) {
    Sample& s = ds.samples[order[k]];
    auto rng = RngStream::keyed(RngPurpose::kDataset, {seed, kNoiseSelection, s.id});
    if (task.kind == TaskKind::kGridGround) {
      s.train_target = noisy_box(std::get<Box>(s.true_target), task.grid_rows, task.grid_cols, rng);
    } else {
      s.train_target = noisy_label(std::get<Label>(s.true_target), task.num_labels, rng);
    }
    s.is_noisy = true;
  }
  return ds;
}

std::vector<Token> encode_answer(const TaskParams& task, const Answer& answer) {
  if (const auto* p = std::get_if<Point>(&answer)) return {row_token(p->row), col_token(task, p->col), kEos};
  return {label_token(std::get<Label>(answer).id), kEos};
}

std::optional<Answer> parse_answer(const TaskParams& task, std::span<const Token> tokens) {
  if (task.kind == TaskKind::kGridGround) {
    if (tokens.size() < 2) return std::nullopt;
    if (tokens.size() > 2 && tokens[2] != kEos) return std::nullopt;
    const auto r = static_cast<long>(tokens[0]) - static_cast<long>(row_token(0));
    const auto c = static_cast<long>(tokens[1]) - static_cast<long>(col_token(task, 0));
    if (r < 0 || r >= task.grid_rows || c < 0 || c >= task.grid_cols) return std::nullopt;
    return Point{static_cast<int>(r), static_cast<int>(c)};
  }
  if (tokens.empty()) return std::nullopt;
  if (tokens.size() > 1 && tokens[1] != kEos) return std::nullopt;
  const auto l = static_cast<long>(tokens[0]) - static_cast<long>(label_token(0));
  if (l < 0 || l >= task.num_labels) return std::nullopt;
  return Label{static_cast<int>(l)};
}

double verify_grounding(const std::optional<Answer>& answer, const Box& target) {
  if (!answer) return 0.0;
  const auto* p = std::get_if<Point>(&*answer);
  return p && target.contains(*p) ? 1.0 : 0.0;
}

double verify_label(const std::optional<Answer>& answer, Label target) {
  if (!answer) return 0.0;
  const auto* l = std::get_if<Label>(&*answer);
  return l && *l == target ? 1.0 : 0.0;
}

double verify(const std::optional<Answer>& answer, const Target& target) {
  if (const auto* b = std::get_if<Box>(&target)) return verify_grounding(answer, *b);
  return verify_label(answer, std::get<Label>(target));
}

double spurious_reward(SpuriousKind kind, const Trajectory& trajectory, RngStream& rng) {
  if (kind == SpuriousKind::kRandom) return rng.bernoulli(0.5) ? 1.0 : 0.0;
  return trajectory.answer.has_value() ? 1.0 : 0.0;
}

std::vector<double> majority_vote_reward(std::span<const std::optional<Answer>> answers) {
  if (answers.empty()) throw std::invalid_argument("majority_vote_reward: empty group");
  std::map<Answer, int> counts;
  for (const auto& a : answers)
    if (a) ++counts[*a];
  std::vector<double> rewards(answers.size(), 0.0);
  if (counts.empty()) return rewards;
  auto best = counts.begin();
  for (auto it = counts.begin(); it != counts.end(); ++it)
    if (it->second > best->second) best = it;
  for (std::size_t i = 0; i < answers.size(); ++i)
    if (answers[i] && *answers[i] == best->first) rewards[i] = 1.0;
  return rewards;
}

namespace {

nlohmann::ordered_json target_json(const Target& t) {
  if (const auto* b = std::get_if<Box>(&t)) return nlohmann::ordered_json::array({b->top, b->left, b->bottom, b->right});
  return std::get<Label>(t).id;
}

Target target_from_json(TaskKind kind, const nlohmann::ordered_json& j) {
  if (kind == TaskKind::kGridGround) {
    const auto v = j.get<std::vector<int>>();
    if (v.size() != 4) throw std::runtime_error("dataset: box target must have 4 coordinates");
    return Box{v[0], v[1], v[2], v[3]};
  }
  return Label{j.get<int>()};
}

}  // namespace

std::string sample_line(const Sample& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["task"] = to_string(s.kind);
  j["prompt_tokens"] = s.prompt;
  j["true_target"] = target_json(s.true_target);
  j["train_target"] = target_json(s.train_target);
  j["is_noisy"] = s.is_noisy;
  return j.dump();
}

std::filesystem::path meta_path(const std::filesystem::path& dataset_path) {
  auto p = dataset_path;
  p += ".meta.json";
  return p;
}

void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset " + path.string());
  for (const auto& s : ds.samples) out << sample_line(s) << '\n';
  if (!out) throw std::runtime_error("failed writing dataset " + path.string());

  nlohmann::ordered_json meta;
  meta["task"] = to_json(ds.task);
  meta["size"] = ds.size();
  meta["noise_rate"] = ds.noise_rate;
  meta["seed"] = ds.seed;
  std::ofstream m(meta_path(path));
  if (!m) throw std::runtime_error("cannot write dataset metadata " + meta_path(path).string());
  m << meta.dump(2) << '\n';
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream m(meta_path(path));
  if (!m) throw std::runtime_error("missing dataset metadata " + meta_path(path).string());
  const auto meta = nlohmann::ordered_json::parse(m);
  Dataset ds;
  ds.task = task_params_from_json(meta.at("task"));
  ds.noise_rate = meta.at("noise_rate").get<double>();
  ds.seed = meta.at("seed").get<std::uint64_t>();

  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read dataset " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::ordered_json::parse(line);
      Sample s;
      s.id = j.at("id").get<std::size_t>();
      s.kind = task_kind_from_string(j.at("task").get<std::string>());
      if (s.kind != ds.task.kind) throw std::runtime_error("task kind differs from metadata");
      s.prompt = j.at("prompt_tokens").get<std::vector<Token>>();
      s.true_target = target_from_json(s.kind, j.at("true_target"));
      s.train_target = target_from_json(s.kind, j.at("train_target"));
      s.is_noisy = j.at("is_noisy").get<bool>();
      ds.samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return ds;
}

}  // namespace egrpo
