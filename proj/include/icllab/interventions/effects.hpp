#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "icllab/errors.hpp"
#include "icllab/harness/evaluate.hpp"
#include "icllab/interventions/banks.hpp"

namespace icl {

/// Scale on which the correct token's score is compared.
enum class EffectSpace { probability, logit };
NLOHMANN_JSON_SERIALIZE_ENUM(EffectSpace, {{EffectSpace::probability, "probability"}, {EffectSpace::logit, "logit"}})

inline const char* to_string(EffectSpace s) { return s == EffectSpace::probability ? "probability" : "logit"; }

template <typename T>
double token_score(std::span<const T> logits, TokenId token, EffectSpace space) {
  if (token < 0 || static_cast<std::size_t>(token) >= logits.size()) {
    throw ContractError("token " + std::to_string(token) + " is outside the model vocabulary");
  }
  const auto y = static_cast<std::size_t>(token);
  if (space == EffectSpace::logit) return static_cast<double>(logits[y]);
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : logits) mx = std::max(mx, static_cast<double>(v));
  double z = 0;
  for (T v : logits) z += std::exp(static_cast<double>(v) - mx);
  return std::exp(static_cast<double>(logits[y]) - mx) / z;
}

template <typename T>
InterventionPlan<T> replace_last(const HeadAddress& head, std::size_t last, const std::vector<T>& v) {
  InterventionPlan<T> plan;
  plan.replace(head, last, v);
  return plan;
}

/// Score change of `correct_token` at the final position when `head`'s
/// output there is replaced by `fv` on a corrupted (shuffled-label) prompt.
template <typename T>
double compute_cie(const Model<T>& model, const Vocabulary& vocab, const HeadAddress& head, const std::vector<T>& fv,
                   const PromptInstance& corrupted, TokenId correct_token,
                   EffectSpace space = EffectSpace::probability) {
  if (corrupted.setting.kind != SettingKind::random) {
    throw ContractError("CIE is measured on shuffled-label prompts, got setting " + corrupted.setting.name());
  }
  model.config().check_address(head);
  if (correct_token < 0 || static_cast<std::size_t>(correct_token) >= model.config().vocab_size) {
    throw ContractError("correct token outside the model vocabulary");
  }
  const auto tokens = corrupted.tokens(vocab);
  const auto base = last_logits(model, tokens);
  const auto patched = last_logits(model, tokens, replace_last(head, tokens.size() - 1, fv));
  return token_score<T>(patched, correct_token, space) - token_score<T>(base, correct_token, space);
}

struct AIEMap {
  std::map<HeadAddress, double> values;
  std::vector<std::string> tasks;
  std::map<std::string, std::size_t> prompt_counts;
  EffectSpace space = EffectSpace::probability;
  std::string category;

  double at(const HeadAddress& h) const {
    const auto it = values.find(h);
    if (it == values.end()) throw ContractError("AIE map has no entry for " + to_string(h));
    return it->second;
  }
  bool operator==(const AIEMap&) const = default;
};

inline void to_json(nlohmann::json& j, const AIEMap& m) {
  j = {{"category", m.category},
       {"space", m.space},
       {"tasks", m.tasks},
       {"prompt_counts", m.prompt_counts},
       {"heads", nlohmann::json::array()}};
  for (const auto& [h, v] : m.values) {
    nlohmann::json e = h;
    e["aie"] = v;
    j["heads"].push_back(std::move(e));
  }
}

inline void from_json(const nlohmann::json& j, AIEMap& m) {
  m.category = j.at("category").get<std::string>();
  m.space = j.at("space").get<EffectSpace>();
  m.tasks = j.at("tasks").get<std::vector<std::string>>();
  m.prompt_counts = j.at("prompt_counts").get<std::map<std::string, std::size_t>>();
  m.values.clear();
  for (const auto& e : j.at("heads")) m.values[e.get<HeadAddress>()] = e.at("aie").get<double>();
}

/// Corrupted prompts and function vectors of one task.
template <typename T>
struct AIETaskInput {
  std::string task_id;
  std::vector<PromptInstance> corrupted;
  const FunctionVectorBank<T>* bank = nullptr;
};

/// Per head: mean over tasks of the mean CIE over that task's corrupted prompts.
template <typename T>
AIEMap compute_aie(const Model<T>& model, const Vocabulary& vocab, const std::vector<AIETaskInput<T>>& tasks,
                   EffectSpace space = EffectSpace::probability, std::string category = {}) {
  if (tasks.empty()) throw ContractError("compute_aie needs at least one task");
  const auto heads = model.config().all_heads();
  AIEMap out;
  out.space = space;
  out.category = std::move(category);
  for (const auto& h : heads) out.values[h] = 0.0;
  for (const auto& t : tasks) {
    if (!t.bank) throw ContractError("no function-vector bank for task '" + t.task_id + "'");
    if (t.corrupted.empty()) throw ContractError("no corrupted prompts for task '" + t.task_id + "'");
    for (const auto& h : heads) {
      if (!t.bank->contains(h)) throw ContractError("bank for '" + t.task_id + "' lacks head " + to_string(h));
    }
    std::map<HeadAddress, double> task_sum;
    for (const auto& p : t.corrupted) {
      if (p.task_id != t.task_id) throw ContractError("prompt of another task in AIE input for '" + t.task_id + "'");
      if (p.setting.kind != SettingKind::random) throw ContractError("AIE prompts must use shuffled labels");
      const auto tokens = p.tokens(vocab);
      const auto y = p.correct_token();
      const double base = token_score<T>(last_logits(model, tokens), y, space);
      for (const auto& h : heads) {
        const auto patched = last_logits(model, tokens, replace_last(h, tokens.size() - 1, t.bank->at(h)));
        task_sum[h] += token_score<T>(patched, y, space) - base;
      }
    }
    const double n = static_cast<double>(t.corrupted.size());
    for (const auto& h : heads) out.values[h] += task_sum[h] / n;
    out.tasks.push_back(t.task_id);
    out.prompt_counts[t.task_id] = t.corrupted.size();
  }
  for (auto& [h, v] : out.values) {
    v /= static_cast<double>(tasks.size());
    if (!std::isfinite(v)) throw NumericError("non-finite AIE for " + to_string(h));
  }
  return out;
}

/// Per head: mean over gold prompts of (score unablated - score with the
/// head's last-token output replaced by its category mean).
template <typename T>
std::map<HeadAddress, double> negative_aie(const Model<T>& model, const Vocabulary& vocab,
                                           const std::vector<PromptInstance>& gold_prompts, const MeanBank<T>& means,
                                           EffectSpace space = EffectSpace::probability) {
  if (gold_prompts.empty()) throw ContractError("negative_aie needs at least one prompt");
  const auto heads = model.config().all_heads();
  std::map<HeadAddress, double> drop;
  for (const auto& h : heads) drop[h] = 0.0;
  for (const auto& p : gold_prompts) {
    if (p.setting.kind != SettingKind::gold) throw ContractError("negative AIE is measured on gold prompts");
    const auto tokens = p.tokens(vocab);
    const auto y = p.correct_token();
    const double base = token_score<T>(last_logits(model, tokens), y, space);
    for (const auto& h : heads) {
      const auto ablated = last_logits(model, tokens, replace_last(h, tokens.size() - 1, means.at(h)));
      drop[h] += base - token_score<T>(ablated, y, space);
    }
  }
  for (auto& [h, v] : drop) v /= static_cast<double>(gold_prompts.size());
  return drop;
}

}  // namespace icl
