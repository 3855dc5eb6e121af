#pragma once

#include <algorithm>
#include <filesystem>
#include <string>

#include "icllab/harness/config.hpp"
#include "icllab/model/checkpoint.hpp"
#include "icllab/tasks/corpus.hpp"
#include "icllab/train/fitness.hpp"
#include "icllab/train/trainer.hpp"

namespace icl {

struct PretrainOutcome {
  Model<float> model;
  TrainLog log;
  FitnessReport fitness;
  std::size_t documents = 0;
  std::size_t tokens = 0;
};

/// Generates the corpus, trains, writes the checkpoint (and log when set) and
/// runs the fitness gates on the result.
inline PretrainOutcome run_pretraining(const PretrainConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  const auto suite = load_suite(cfg.resolve(cfg.suite));
  const auto corpus = generate_pretraining_corpus(suite, cfg.corpus_seed, cfg.repetitions, cfg.corpus);
  std::size_t tokens = 0, longest = 0;
  for (const auto& s : corpus) {
    tokens += s.tokens.size();
    longest = std::max(longest, s.tokens.size());
  }
  auto mc = cfg.model;
  if (mc.vocab_size == 0) mc.vocab_size = suite.vocab.size();
  if (mc.vocab_size != suite.vocab.size()) throw ConfigError("model vocabulary does not match the suite");
  if (longest > mc.max_seq_len) {
    throw ConfigError("corpus documents reach " + std::to_string(longest) + " tokens but max_seq_len is " +
                      std::to_string(mc.max_seq_len));
  }
  Model<float> model(mc.normalized(), cfg.init_seed);
  auto log = pretrain(model, corpus, cfg.train, &suite, progress);
  checkpoint_save(model, cfg.resolve(cfg.checkpoint));
  if (!cfg.log.empty()) log.save_csv(cfg.resolve(cfg.log));
  auto fit = fitness_check(model, suite);
  return {std::move(model), std::move(log), std::move(fit), corpus.size(), tokens};
}

}  // namespace icl
