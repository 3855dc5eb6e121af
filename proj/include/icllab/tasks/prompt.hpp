#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "icllab/errors.hpp"
#include "icllab/tasks/task.hpp"

namespace icl {

/// Fixed-point-free permutation of a task's option indices.
class FlipMap {
 public:
  FlipMap() = default;
  explicit FlipMap(std::vector<std::size_t> target) : target_(std::move(target)) {
    if (target_.size() < 2) throw ContractError("a flip map needs at least two options");
    std::vector<bool> hit(target_.size(), false);
    for (std::size_t i = 0; i < target_.size(); ++i) {
      if (target_[i] >= target_.size() || hit[target_[i]]) throw ContractError("flip map is not a permutation");
      if (target_[i] == i) throw ContractError("flip map has a fixed point at option " + std::to_string(i));
      hit[target_[i]] = true;
    }
  }

  std::size_t operator()(std::size_t option) const { return target_.at(option); }
  std::size_t size() const { return target_.size(); }
  const std::vector<std::size_t>& targets() const { return target_; }
  bool operator==(const FlipMap&) const = default;

 private:
  std::vector<std::size_t> target_;
};

/// Uniform derangement of the task's options.
inline FlipMap make_flip_map(const TaskSpec& task, std::mt19937_64& rng) {
  const auto n = task.n_options();
  if (n < 2) throw ContractError("task '" + task.id + "' has fewer than two options; no flip map exists");
  std::vector<std::size_t> p(n);
  for (;;) {
    std::iota(p.begin(), p.end(), 0);
    std::shuffle(p.begin(), p.end(), rng);
    bool fixed = false;
    for (std::size_t i = 0; i < n; ++i) fixed = fixed || p[i] == i;
    if (!fixed) return FlipMap(p);
  }
}

/// Deterministic per (task, seed).
inline FlipMap make_flip_map(const TaskSpec& task, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : task.id) h = (h ^ c) * 1099511628211ULL;
  std::mt19937_64 rng(seed ^ h);
  return make_flip_map(task, rng);
}

enum class SettingKind { no_demo, alpha_correct, gold, random, flipped };

/// `flipped_labels` marks the no-demo baseline scored against flipped labels.
struct Setting {
  SettingKind kind = SettingKind::gold;
  int alpha = 100;
  bool flipped_labels = false;

  static Setting no_demo(bool flipped = false) { return {SettingKind::no_demo, 0, flipped}; }
  static Setting gold() { return {SettingKind::gold, 100, false}; }
  static Setting random() { return {SettingKind::random, 0, false}; }
  static Setting flipped() { return {SettingKind::flipped, 0, true}; }
  static Setting alpha_correct(int a) {
    if (a < 0 || a > 100) throw ContractError("alpha must be a percentage in [0, 100]");
    return {SettingKind::alpha_correct, a, false};
  }

  bool operator==(const Setting&) const = default;

  std::string name() const {
    switch (kind) {
      case SettingKind::no_demo: return flipped_labels ? "no_demo_flipped" : "no_demo";
      case SettingKind::alpha_correct: return "alpha_" + std::to_string(alpha);
      case SettingKind::gold: return "gold";
      case SettingKind::random: return "random";
      case SettingKind::flipped: return "flipped";
    }
    return "?";
  }

  static Setting parse(const std::string& s) {
    if (s == "no_demo") return no_demo();
    if (s == "no_demo_flipped") return no_demo(true);
    if (s == "gold") return gold();
    if (s == "random") return random();
    if (s == "flipped") return flipped();
    if (s.rfind("alpha_", 0) == 0) {
      try {
        std::size_t used = 0;
        const int a = std::stoi(s.substr(6), &used);
        if (used == s.size() - 6) return alpha_correct(a);
      } catch (const std::logic_error&) {
      }
    }
    throw ConfigError("unknown setting '" + s + "'");
  }
};

/// Number of correct demonstrations under alpha: round(alpha * k / 100), halves rounded up.
inline std::size_t correct_count(int alpha, std::size_t k) {
  return (2 * static_cast<std::size_t>(alpha) * k + 100) / 200;
}

enum class QuerySplit { test, reserve, train };

struct Demonstration {
  std::vector<TokenId> question;
  std::vector<TokenId> answer;
  bool operator==(const Demonstration&) const = default;
  NLOHMANN_DEFINE_TYPE_INTRUSIVE(Demonstration, question, answer)
};

struct PromptInstance {
  std::string task_id;
  Setting setting;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::size_t query_sample = 0;  // index into the task's samples
  std::vector<Demonstration> demonstrations;
  std::vector<TokenId> query;
  std::vector<TokenId> options;
  std::size_t correct_option = 0;

  bool operator==(const PromptInstance&) const = default;

  TokenId correct_token() const { return options.at(correct_option); }

  /// "<bos> Q: q \n A: a \n\n ... Q: query \n A:"
  std::vector<TokenId> tokens(const Vocabulary& v) const {
    std::vector<TokenId> out{v.bos()};
    for (const auto& d : demonstrations) {
      out.push_back(v.question());
      out.insert(out.end(), d.question.begin(), d.question.end());
      out.push_back(v.line_break());
      out.push_back(v.answer());
      out.insert(out.end(), d.answer.begin(), d.answer.end());
      out.push_back(v.demo_break());
    }
    out.push_back(v.question());
    out.insert(out.end(), query.begin(), query.end());
    out.push_back(v.line_break());
    out.push_back(v.answer());
    return out;
  }
};

struct PromptOptions {
  QuerySplit query_from = QuerySplit::test;
  std::optional<std::size_t> query_sample;  // fixed query; otherwise drawn from query_from
  std::optional<FlipMap> flip;              // required for flipped settings
};

namespace detail {

inline const std::vector<std::size_t>& split_indices(const TaskSpec& t, QuerySplit s) {
  switch (s) {
    case QuerySplit::test: return t.split.test;
    case QuerySplit::reserve: return t.split.reserve;
    case QuerySplit::train: return t.split.train;
  }
  return t.split.test;
}

}  // namespace detail

/// Builds one prompt. The random draws do not depend on the setting, so
/// prompts built from equal rng states share their query and demonstration
/// questions, and the corrupted demonstrations for a larger alpha are a subset
/// of those for a smaller one.
inline PromptInstance build_prompt(const TaskSpec& task, std::size_t k, const Setting& setting, std::mt19937_64& rng,
                                   const PromptOptions& opts = {}) {
  if ((k == 0) != (setting.kind == SettingKind::no_demo)) {
    throw ContractError("k = 0 exactly when the setting is no_demo (got k = " + std::to_string(k) + ", setting " +
                        setting.name() + ")");
  }
  if (setting.alpha < 0 || setting.alpha > 100) throw ContractError("alpha must be a percentage in [0, 100]");
  const bool flips = setting.kind == SettingKind::flipped || setting.flipped_labels;
  if (flips && !opts.flip) throw ContractError("flipped setting requires the task's flip map");
  if (flips && opts.flip->size() != task.n_options()) throw ContractError("flip map size does not match task options");
  const auto& pool = task.split.demo_pool;
  if (k > pool.size()) {
    throw SamplingError("k = " + std::to_string(k) + " exceeds the " + std::to_string(pool.size()) +
                        " demonstration pairs of task '" + task.id + "'");
  }

  PromptInstance p;
  p.task_id = task.id;
  p.setting = setting;
  p.k = k;
  p.options = task.options;
  if (opts.query_sample) {
    if (*opts.query_sample >= task.samples.size()) throw ContractError("query sample index out of range");
    p.query_sample = *opts.query_sample;
    rng.discard(1);
  } else {
    const auto& from = detail::split_indices(task, opts.query_from);
    if (from.empty()) throw SamplingError("no query samples in the requested split of '" + task.id + "'");
    p.query_sample = from[std::uniform_int_distribution<std::size_t>(0, from.size() - 1)(rng)];
  }

  std::vector<std::size_t> picked(pool.size());
  std::iota(picked.begin(), picked.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(picked[i], picked[std::uniform_int_distribution<std::size_t>(i, picked.size() - 1)(rng)]);
  }
  std::vector<std::size_t> correct_order(k), shuffled(k), wrong(k);
  std::iota(correct_order.begin(), correct_order.end(), 0);
  std::iota(shuffled.begin(), shuffled.end(), 0);
  std::shuffle(correct_order.begin(), correct_order.end(), rng);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto n_opt = task.n_options();
  for (std::size_t i = 0; i < k; ++i) {
    const auto right = task.samples[pool[picked[i]]].answer;
    const auto draw = n_opt > 1 ? std::uniform_int_distribution<std::size_t>(0, n_opt - 2)(rng) : 0;
    wrong[i] = n_opt > 1 && draw >= right ? draw + 1 : draw;
  }

  std::vector<bool> keep_correct(k, true);
  if (setting.kind == SettingKind::alpha_correct) {
    const auto n_correct = correct_count(setting.alpha, k);
    for (std::size_t j = n_correct; j < k; ++j) keep_correct[correct_order[j]] = false;
  }
  for (std::size_t i = 0; i < k; ++i) {
    const auto& s = task.samples[pool[picked[i]]];
    std::size_t ans = s.answer;
    switch (setting.kind) {
      case SettingKind::alpha_correct: ans = keep_correct[i] ? s.answer : wrong[i]; break;
      case SettingKind::random: ans = task.samples[pool[picked[shuffled[i]]]].answer; break;
      case SettingKind::flipped: ans = (*opts.flip)(s.answer); break;
      default: break;
    }
    p.demonstrations.push_back({s.question, {task.options[ans]}});
  }
  const auto& q = task.samples[p.query_sample];
  p.query = q.question;
  p.correct_option = flips ? (*opts.flip)(q.answer) : q.answer;
  return p;
}

/// Convenience form with a fresh generator seeded by `seed`; the seed is recorded.
inline PromptInstance build_prompt(const TaskSpec& task, std::size_t k, const Setting& setting, std::uint64_t seed,
                                   const PromptOptions& opts = {}) {
  std::mt19937_64 rng(seed);
  auto p = build_prompt(task, k, setting, rng, opts);
  p.seed = seed;
  return p;
}

inline void to_json(nlohmann::json& j, const PromptInstance& p, const Vocabulary* vocab) {
  j = {{"task", p.task_id},
       {"setting", p.setting.name()},
       {"k", p.k},
       {"seed", p.seed},
       {"query_sample", p.query_sample},
       {"demonstrations", p.demonstrations},
       {"query", p.query},
       {"options", p.options},
       {"correct_option", p.correct_option}};
  if (vocab) {
    const auto toks = p.tokens(*vocab);
    j["tokens"] = toks;
    j["text"] = vocab->render(toks);
  }
}

inline void to_json(nlohmann::json& j, const PromptInstance& p) { to_json(j, p, nullptr); }

inline void from_json(const nlohmann::json& j, PromptInstance& p) {
  p.task_id = j.at("task").get<std::string>();
  p.setting = Setting::parse(j.at("setting").get<std::string>());
  p.k = j.at("k").get<std::size_t>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.query_sample = j.at("query_sample").get<std::size_t>();
  p.demonstrations = j.at("demonstrations").get<std::vector<Demonstration>>();
  p.query = j.at("query").get<std::vector<TokenId>>();
  p.options = j.at("options").get<std::vector<TokenId>>();
  p.correct_option = j.at("correct_option").get<std::size_t>();
}

/// One JSON object per line, including rendered tokens and text.
inline void save_prompts(const std::vector<PromptInstance>& prompts, const Vocabulary& vocab,
                         const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  for (const auto& p : prompts) {
    nlohmann::json j;
    to_json(j, p, &vocab);
    out << j.dump() << '\n';
  }
}

inline std::vector<PromptInstance> load_prompts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read prompts " + path.string());
  std::vector<PromptInstance> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(nlohmann::json::parse(line).get<PromptInstance>());
  }
  return out;
}

}  // namespace icl
