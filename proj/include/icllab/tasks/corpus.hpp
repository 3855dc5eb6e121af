#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "json.hpp"

#include "icllab/errors.hpp"
#include "icllab/tasks/task.hpp"

namespace icl {

struct CorpusSpec {
  std::size_t pairs_per_sheet = 8;          // fact-sheet length in (key, value) pairs
  std::size_t max_filler_gap = 2;           // filler words inserted before each fact
  std::size_t retrieval_episodes = 1500;    // per retrieval task
  std::size_t max_retrieval_demos = 32;
  std::size_t contextual_episodes = 1500;   // per contextual task, rounded up to whole label cycles
  std::size_t max_contextual_demos = 40;
  std::size_t filler_documents = 50;
  std::size_t filler_length = 24;

  bool operator==(const CorpusSpec&) const = default;
  NLOHMANN_DEFINE_TYPE_INTRUSIVE_WITH_DEFAULT(CorpusSpec, pairs_per_sheet, max_filler_gap, retrieval_episodes,
                                              max_retrieval_demos, contextual_episodes, max_contextual_demos,
                                              filler_documents, filler_length)
};

enum class DocumentKind : std::uint8_t { fact_sheet, retrieval_episode, contextual_episode, filler };

/// One training document. `target[i]` marks tokens[i] as an answer the loss
/// is taken on (predicted from position i - 1).
struct Sequence {
  DocumentKind kind = DocumentKind::filler;
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> target;

  bool operator==(const Sequence&) const = default;
  std::size_t n_targets() const { return static_cast<std::size_t>(std::count(target.begin(), target.end(), 1)); }

  void push(TokenId t, bool is_target = false) {
    tokens.push_back(t);
    target.push_back(is_target ? 1 : 0);
  }
  void push_demo(const Vocabulary& v, const std::vector<TokenId>& question, TokenId answer, bool close = true) {
    push(v.question());
    for (TokenId t : question) push(t);
    push(v.line_break());
    push(v.answer());
    push(answer, true);
    if (close) push(v.demo_break());
  }
};

namespace detail {

// Cycles through a shuffled index list, reshuffling on wrap-around, so every
// element is drawn before any repeats.
class ShuffledStream {
 public:
  ShuffledStream(std::vector<std::size_t> items, std::mt19937_64& rng) : items_(std::move(items)), rng_(rng) {
    std::shuffle(items_.begin(), items_.end(), rng_);
  }
  std::size_t next() {
    if (pos_ == items_.size()) {
      std::shuffle(items_.begin(), items_.end(), rng_);
      pos_ = 0;
    }
    return items_[pos_++];
  }

 private:
  std::vector<std::size_t> items_;
  std::mt19937_64& rng_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Pretraining documents:
///  - fact sheets "<bos> cue [filler] Q: key \n A: value \n\n ..." covering every
///    retrieval pair (train and test) `repetitions` times;
///  - gold retrieval episodes without the cue, drawn from every pair, so the
///    relation must be read off the demonstrations;
///  - contextual episodes whose label words are permuted per episode. Each
///    question sequence appears once under every cyclic shift of its
///    permutation, so every class meets every label word equally often and
///    no class-label association is learnable;
///  - filler documents of unrelated words.
inline std::vector<Sequence> generate_pretraining_corpus(const TaskSuite& suite, std::uint64_t seed,
                                                         std::size_t repetitions, const CorpusSpec& spec = {}) {
  if (repetitions < 1) throw ContractError("repetitions must be at least 1");
  if (spec.pairs_per_sheet == 0) throw ContractError("pairs_per_sheet must be positive");
  std::mt19937_64 rng(seed);
  const auto& v = suite.vocab;
  std::vector<Sequence> docs;
  const auto filler_word = [&] {
    return suite.filler[std::uniform_int_distribution<std::size_t>(0, suite.filler.size() - 1)(rng)];
  };

  for (const auto* task : suite.of(TaskCategory::retrieval)) {
    std::vector<std::size_t> all(task->samples.size() * repetitions);
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i % task->samples.size();
    std::shuffle(all.begin(), all.end(), rng);
    for (std::size_t start = 0; start < all.size(); start += spec.pairs_per_sheet) {
      Sequence s;
      s.kind = DocumentKind::fact_sheet;
      s.push(v.bos());
      s.push(task->cue);
      for (std::size_t i = start; i < std::min(all.size(), start + spec.pairs_per_sheet); ++i) {
        const auto gap = suite.filler.empty() ? 0
                                              : std::uniform_int_distribution<std::size_t>(0, spec.max_filler_gap)(rng);
        for (std::size_t g = 0; g < gap; ++g) s.push(filler_word());
        const auto& sample = task->samples[all[i]];
        s.push_demo(v, sample.question, task->answer_token(sample));
      }
      docs.push_back(std::move(s));
    }

    std::vector<std::size_t> every(task->samples.size());
    std::iota(every.begin(), every.end(), 0);
    detail::ShuffledStream pairs(every, rng);
    for (std::size_t e = 0; e < spec.retrieval_episodes; ++e) {
      Sequence s;
      s.kind = DocumentKind::retrieval_episode;
      s.push(v.bos());
      const auto n = std::uniform_int_distribution<std::size_t>(1, spec.max_retrieval_demos + 1)(rng);
      std::vector<std::size_t> used;
      for (std::size_t d = 0; d < n && d < every.size(); ++d) {
        std::size_t idx = pairs.next();
        if (std::find(used.begin(), used.end(), idx) != used.end()) continue;
        used.push_back(idx);
        const auto& sample = task->samples[idx];
        s.push_demo(v, sample.question, task->answer_token(sample), d + 1 < n);
      }
      docs.push_back(std::move(s));
    }
  }

  for (const auto* task : suite.of(TaskCategory::contextual)) {
    detail::ShuffledStream train(task->split.train, rng);
    const auto n_labels = task->n_options();
    std::vector<std::size_t> labels(n_labels);
    for (std::size_t e = 0; e < spec.contextual_episodes; e += n_labels) {
      std::iota(labels.begin(), labels.end(), 0);
      std::shuffle(labels.begin(), labels.end(), rng);
      const auto n = std::uniform_int_distribution<std::size_t>(1, spec.max_contextual_demos + 1)(rng);
      std::vector<std::size_t> questions(n);
      for (auto& q : questions) q = train.next();
      for (std::size_t shift = 0; shift < n_labels; ++shift) {
        Sequence s;
        s.kind = DocumentKind::contextual_episode;
        s.push(v.bos());
        for (std::size_t d = 0; d < n; ++d) {
          const auto& sample = task->samples[questions[d]];
          s.push_demo(v, sample.question, task->options[(labels[sample.answer] + shift) % n_labels], d + 1 < n);
        }
        docs.push_back(std::move(s));
      }
    }
  }

  for (std::size_t e = 0; e < spec.filler_documents && !suite.filler.empty(); ++e) {
    Sequence s;
    s.push(v.bos());
    for (std::size_t i = 0; i < spec.filler_length; ++i) s.push(filler_word());
    docs.push_back(std::move(s));
  }

  std::shuffle(docs.begin(), docs.end(), rng);
  return docs;
}

}  // namespace icl
