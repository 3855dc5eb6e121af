#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "icllab/harness/evaluate.hpp"
#include "icllab/seeding.hpp"
#include "icllab/tasks/prompt.hpp"

namespace icl {

/// "<bos> cue Q: key \n A:" where the cue word names the relation.
inline std::vector<TokenId> zero_shot_tokens(const Vocabulary& v, const TaskSpec& task, const Sample& s) {
  std::vector<TokenId> out{v.bos(), task.cue, v.question()};
  out.insert(out.end(), s.question.begin(), s.question.end());
  out.push_back(v.line_break());
  out.push_back(v.answer());
  return out;
}

/// One prompt per sample of `split` (at most `limit`), each with its own derived seed.
inline std::vector<PromptInstance> prompts_over(const TaskSpec& task, const std::vector<std::size_t>& split,
                                                std::size_t k, const Setting& setting, std::uint64_t seed,
                                                std::size_t limit = static_cast<std::size_t>(-1),
                                                std::optional<FlipMap> flip = std::nullopt) {
  std::vector<PromptInstance> out;
  for (std::size_t i = 0; i < split.size() && i < limit; ++i) {
    PromptOptions o;
    o.query_sample = split[i];
    o.flip = flip;
    out.push_back(build_prompt(task, k, setting, derive_seed(seed, {hash_name(task.id), split[i]}), o));
  }
  return out;
}

template <typename T>
double zero_shot_accuracy(const Model<T>& model, const TaskSuite& suite, std::size_t limit_per_task) {
  std::size_t hit = 0, n = 0;
  for (const auto* t : suite.of(TaskCategory::retrieval)) {
    for (std::size_t i = 0; i < t->split.train.size() && i < limit_per_task; ++i) {
      const auto& s = t->samples[t->split.train[i]];
      const auto logits = last_logits(model, zero_shot_tokens(suite.vocab, *t, s));
      hit += argmax_option<T>(logits, t->options) == s.answer;
      ++n;
    }
  }
  return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
}

template <typename T>
double gold_icl_accuracy(const Model<T>& model, const TaskSuite& suite, std::size_t k, std::uint64_t seed,
                         std::size_t limit_per_task) {
  std::size_t hit = 0, n = 0;
  for (const auto* t : suite.of(TaskCategory::retrieval)) {
    const auto ps = prompts_over(*t, t->split.test, k, Setting::gold(), seed, limit_per_task);
    const auto e = evaluate(model, suite.vocab, ps);
    hit += static_cast<std::size_t>(std::lround(e.accuracy * static_cast<double>(ps.size())));
    n += ps.size();
  }
  return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
}

struct FitnessGates {
  double zero_shot = 0.90;
  double gold_icl = 0.70;
  double chance_band = 0.15;
  std::size_t icl_k = 10;
  std::uint64_t seed = 0;
};

inline bool within_band(double accuracy, double chance, double band) {
  return std::abs(accuracy - chance) <= band + 1e-12;
}

/// Whether `accuracy` lies within `band` of uniform chance over `n_options`.
inline bool within_chance_band(double accuracy, std::size_t n_options, double band) {
  if (n_options == 0) throw ContractError("chance needs at least one option");
  return within_band(accuracy, 1.0 / static_cast<double>(n_options), band);
}

struct ContextualBaseline {
  std::string task_id;
  double accuracy = 0;
  double chance = 0;
  bool within_band = false;
};

struct FitnessReport {
  double zero_shot = 0;
  double gold_icl = 0;
  double contextual_accuracy = 0;  // pooled over every contextual no-demo prompt
  double contextual_chance = 0;
  std::vector<ContextualBaseline> contextual;
  bool pass_zero_shot = false;
  bool pass_gold_icl = false;
  bool pass_contextual = false;

  bool pass() const { return pass_zero_shot && pass_gold_icl && pass_contextual; }

  std::string summary() const {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(3);
    os << (pass() ? "PASS" : "FAIL") << ": zero-shot retrieval " << zero_shot << (pass_zero_shot ? " ok" : " LOW")
       << "; gold ICL " << gold_icl << (pass_gold_icl ? " ok" : " LOW") << "; contextual no-demo "
       << contextual_accuracy << " (chance " << contextual_chance << (pass_contextual ? ") ok" : ") OUT") << " [";
    for (std::size_t i = 0; i < contextual.size(); ++i) {
      const auto& c = contextual[i];
      os << (i ? " " : "") << c.task_id << '=' << c.accuracy << "/" << c.chance << (c.within_band ? "" : "*");
    }
    os << ']';
    if (!pass()) os << " -- fitness not reached";
    return os.str();
  }
};

/// (a) zero-shot retrieval on all training pairs, (b) gold ICL on held-out
/// pairs, (c) no-demo accuracy over the contextual tasks' held-out samples
/// near chance. Like (a) and (b), (c) pools prompts across tasks; per-task
/// values are reported, and marked when outside the band, but do not gate.
template <typename T>
FitnessReport fitness_check(const Model<T>& model, const TaskSuite& suite, const FitnessGates& gates = {}) {
  FitnessReport r;
  const auto all = static_cast<std::size_t>(-1);
  r.zero_shot = zero_shot_accuracy(model, suite, all);
  r.gold_icl = gold_icl_accuracy(model, suite, gates.icl_k, gates.seed, all);
  r.pass_zero_shot = r.zero_shot >= gates.zero_shot;
  r.pass_gold_icl = r.gold_icl >= gates.gold_icl;
  double hits = 0, chance = 0, n = 0;
  for (const auto* t : suite.of(TaskCategory::contextual)) {
    const auto ps = prompts_over(*t, t->split.test, 0, Setting::no_demo(), gates.seed);
    const auto e = evaluate(model, suite.vocab, ps);
    ContextualBaseline b{t->id, e.accuracy, 1.0 / static_cast<double>(t->n_options()), false};
    b.within_band = within_chance_band(b.accuracy, t->n_options(), gates.chance_band);
    r.contextual.push_back(b);
    const auto m = static_cast<double>(ps.size());
    hits += e.accuracy * m;
    chance += b.chance * m;
    n += m;
  }
  if (n > 0) {
    r.contextual_accuracy = hits / n;
    r.contextual_chance = chance / n;
  }
  r.pass_contextual = n == 0 || within_band(r.contextual_accuracy, r.contextual_chance, gates.chance_band);
  return r;
}

}  // namespace icl
