#pragma once

#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "icllab/errors.hpp"
#include "icllab/model/model.hpp"
#include "icllab/tasks/prompt.hpp"

namespace icl {

/// Index of the largest option logit; the lowest index wins ties.
template <typename T>
std::size_t argmax_option(std::span<const T> last_logits, std::span<const TokenId> options) {
  if (options.empty()) throw ContractError("prompt has no options");
  std::size_t best = 0;
  for (std::size_t i = 0; i < options.size(); ++i) {
    const auto t = options[i];
    if (t < 0 || static_cast<std::size_t>(t) >= last_logits.size()) {
      throw ContractError("option token " + std::to_string(t) + " is outside the model vocabulary");
    }
    if (last_logits[static_cast<std::size_t>(t)] > last_logits[static_cast<std::size_t>(options[best])]) best = i;
  }
  return best;
}

/// Logits at the final position of the prompt.
template <typename T>
std::vector<T> last_logits(const Model<T>& model, const std::vector<TokenId>& tokens,
                           const InterventionPlan<T>& plan = {}) {
  ForwardOptions<T> opts;
  opts.plan = plan;
  opts.last_logits_only = true;
  return forward(model, tokens, opts).logits.values();
}

/// Unweighted mean of per-class F1; a class with no support in either
/// vector contributes 0.
inline double macro_f1(std::span<const std::size_t> predictions, std::span<const std::size_t> golds,
                       std::size_t n_classes) {
  if (predictions.empty()) throw ContractError("macro_f1 of an empty set");
  if (predictions.size() != golds.size()) throw ContractError("predictions and golds differ in length");
  if (n_classes == 0) throw ContractError("macro_f1 needs at least one class");
  std::vector<std::size_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto p = predictions[i], g = golds[i];
    if (p >= n_classes || g >= n_classes) throw ContractError("label out of range in macro_f1");
    if (p == g) {
      ++tp[p];
    } else {
      ++fp[p];
      ++fn[g];
    }
  }
  double total = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    const auto denom = 2 * tp[c] + fp[c] + fn[c];
    if (denom > 0) total += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
  }
  return total / static_cast<double>(n_classes);
}

inline double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> golds) {
  if (predictions.empty()) throw ContractError("accuracy of an empty set");
  if (predictions.size() != golds.size()) throw ContractError("predictions and golds differ in length");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hit += predictions[i] == golds[i];
  return static_cast<double>(hit) / static_cast<double>(predictions.size());
}

struct Evaluation {
  std::vector<std::size_t> predictions;
  std::vector<std::size_t> golds;
  double accuracy = 0;
  double macro_f1 = 0;
};

/// First-token scoring with final-position logits supplied by `logits_of`
/// (for instance an intervened forward). All prompts must share one option list.
template <typename LogitsFn>
Evaluation evaluate_with(const std::vector<PromptInstance>& prompts, LogitsFn&& logits_of) {
  if (prompts.empty()) throw ContractError("evaluation needs at least one prompt");
  Evaluation e;
  for (const auto& p : prompts) {
    if (p.options != prompts.front().options) throw ContractError("prompts in one evaluation must share options");
    const auto logits = logits_of(p);
    using T = typename std::decay_t<decltype(logits)>::value_type;
    e.predictions.push_back(argmax_option<T>(logits, p.options));
    e.golds.push_back(p.correct_option);
  }
  e.accuracy = accuracy(e.predictions, e.golds);
  e.macro_f1 = macro_f1(e.predictions, e.golds, prompts.front().options.size());
  return e;
}

/// Plain first-token scoring of every prompt.
template <typename T>
Evaluation evaluate(const Model<T>& model, const Vocabulary& vocab, const std::vector<PromptInstance>& prompts) {
  return evaluate_with(prompts, [&](const PromptInstance& p) { return last_logits(model, p.tokens(vocab)); });
}

}  // namespace icl
