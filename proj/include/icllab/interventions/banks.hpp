#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "icllab/errors.hpp"
#include "icllab/model/model.hpp"
#include "icllab/tasks/prompt.hpp"
#include "icllab/tasks/task.hpp"

namespace icl {

/// Mean last-token output per head. For a task this is its function vector;
/// pooled over a category's tasks it is the category mean used for ablation.
template <typename T>
struct HeadMeanBank {
  std::string label;  // task id, or category name for pooled banks
  std::map<HeadAddress, std::vector<T>> vectors;
  std::size_t n_prompts = 0;
  std::size_t k = 0;

  const std::vector<T>& at(const HeadAddress& h) const {
    const auto it = vectors.find(h);
    if (it == vectors.end()) throw ContractError("bank '" + label + "' has no vector for head " + to_string(h));
    return it->second;
  }
  bool contains(const HeadAddress& h) const { return vectors.count(h) > 0; }
};

template <typename T>
using FunctionVectorBank = HeadMeanBank<T>;
template <typename T>
using MeanBank = HeadMeanBank<T>;

namespace detail {

template <typename T>
CaptureSet last_token_captures(const ModelConfig& cfg, std::size_t last) {
  CaptureSet s;
  for (const auto& h : cfg.all_heads()) s.insert({h, last});
  return s;
}

}  // namespace detail

/// Per-head arithmetic mean of the last-token head outputs over `prompts`.
template <typename T>
HeadMeanBank<T> extract_head_means(const Model<T>& model, const Vocabulary& vocab,
                                   const std::vector<PromptInstance>& prompts, std::string label) {
  if (prompts.empty()) throw ContractError("cannot extract head means from an empty prompt set");
  const auto heads = model.config().all_heads();
  std::map<HeadAddress, std::vector<double>> sums;
  for (const auto& h : heads) sums[h].assign(model.config().head_dim(h.stream), 0.0);
  for (const auto& p : prompts) {
    const auto tokens = p.tokens(vocab);
    ForwardOptions<T> opts;
    opts.capture = detail::last_token_captures<T>(model.config(), tokens.size() - 1);
    opts.last_logits_only = true;
    const auto r = forward(model, tokens, opts);
    for (const auto& h : heads) {
      const auto& v = r.head_output(h, tokens.size() - 1);
      auto& s = sums[h];
      for (std::size_t i = 0; i < v.size(); ++i) s[i] += static_cast<double>(v[i]);
    }
  }
  HeadMeanBank<T> bank;
  bank.label = std::move(label);
  bank.n_prompts = prompts.size();
  bank.k = prompts.front().k;
  const double n = static_cast<double>(prompts.size());
  for (const auto& [h, s] : sums) {
    auto& out = bank.vectors[h];
    for (double x : s) {
      const double m = x / n;
      if (!std::isfinite(m)) throw NumericError("non-finite head mean for " + to_string(h));
      out.push_back(static_cast<T>(m));
    }
  }
  return bank;
}

/// Function vectors of one task from its gold prompts.
template <typename T>
FunctionVectorBank<T> extract_fv(const Model<T>& model, const Vocabulary& vocab, const TaskSpec& task,
                                 const std::vector<PromptInstance>& prompts) {
  for (const auto& p : prompts) {
    if (p.task_id != task.id) throw ContractError("prompt of task '" + p.task_id + "' passed for '" + task.id + "'");
  }
  return extract_head_means(model, vocab, prompts, task.id);
}

/// Category mean over the prompts of every task in the category.
template <typename T>
MeanBank<T> build_mean_bank(const Model<T>& model, const Vocabulary& vocab, TaskCategory category,
                            const std::vector<PromptInstance>& prompts) {
  return extract_head_means(model, vocab, prompts, to_string(category));
}

template <typename T>
void to_json(nlohmann::json& j, const HeadMeanBank<T>& b) {
  j = {{"label", b.label}, {"n_prompts", b.n_prompts}, {"k", b.k}, {"heads", nlohmann::json::array()}};
  for (const auto& [h, v] : b.vectors) {
    nlohmann::json e = h;
    e["vector"] = v;
    j["heads"].push_back(std::move(e));
  }
}

template <typename T>
void from_json(const nlohmann::json& j, HeadMeanBank<T>& b) {
  b.label = j.at("label").get<std::string>();
  b.n_prompts = j.at("n_prompts").get<std::size_t>();
  b.k = j.at("k").get<std::size_t>();
  b.vectors.clear();
  for (const auto& e : j.at("heads")) {
    b.vectors[e.get<HeadAddress>()] = e.at("vector").get<std::vector<T>>();
  }
}

}  // namespace icl
