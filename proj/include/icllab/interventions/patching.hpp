#pragma once

#include <vector>

#include "icllab/errors.hpp"
#include "icllab/harness/evaluate.hpp"
#include "icllab/interventions/banks.hpp"
#include "icllab/interventions/heads.hpp"

namespace icl {

/// Adds each head's function vector to its output at the last token of a
/// no-demo prompt and returns the final-position logits.
template <typename T>
std::vector<T> steer(const Model<T>& model, const Vocabulary& vocab, const PromptInstance& prompt,
                     const HeadSet& heads, const FunctionVectorBank<T>& bank) {
  if (prompt.setting.kind != SettingKind::no_demo) {
    throw ContractError("steering starts from a no-demo prompt, got " + prompt.setting.name());
  }
  const auto tokens = prompt.tokens(vocab);
  InterventionPlan<T> plan;
  for (const auto& h : heads.heads) plan.add(h, tokens.size() - 1, bank.at(h));
  return last_logits(model, tokens, plan);
}

template <typename T>
HeadSet layer_heads(const Model<T>& model, std::size_t layer) {
  if (layer >= model.config().n_layers) {
    throw AddressError("layer " + std::to_string(layer) + " out of range for a " +
                       std::to_string(model.config().n_layers) + "-layer model");
  }
  return HeadSet(model.config().layer_heads(layer), Selection::layer);
}

/// Steers every head, across streams, of one layer.
template <typename T>
std::vector<T> layerwise_steer(const Model<T>& model, const Vocabulary& vocab, const PromptInstance& prompt,
                               std::size_t layer, const FunctionVectorBank<T>& bank) {
  return steer(model, vocab, prompt, layer_heads(model, layer), bank);
}

enum class AblationMode { zero, mean };

/// Replaces the heads' last-token outputs of a gold prompt with zeros or with
/// their category means.
template <typename T>
std::vector<T> ablate(const Model<T>& model, const Vocabulary& vocab, const PromptInstance& prompt,
                      const HeadSet& heads, AblationMode mode, const MeanBank<T>* means = nullptr) {
  if (prompt.setting.kind != SettingKind::gold) {
    throw ContractError("ablation is measured on gold prompts, got " + prompt.setting.name());
  }
  if (mode == AblationMode::mean && !means) throw ContractError("mean ablation requires a mean bank");
  const auto tokens = prompt.tokens(vocab);
  const auto last = tokens.size() - 1;
  InterventionPlan<T> plan;
  for (const auto& h : heads.heads) {
    if (mode == AblationMode::zero) {
      plan.zero(h, last);
    } else {
      plan.replace(h, last, means->at(h));
    }
  }
  return last_logits(model, tokens, plan);
}

}  // namespace icl
