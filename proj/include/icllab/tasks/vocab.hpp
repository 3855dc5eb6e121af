#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "icllab/errors.hpp"

namespace icl {

using TokenId = int;

/// Closed word-level vocabulary. Ids are assigned in insertion order.
class Vocabulary {
 public:
  static constexpr const char* kBos = "<bos>";
  static constexpr const char* kQuestion = "Q:";
  static constexpr const char* kAnswer = "A:";
  static constexpr const char* kLineBreak = "\n";
  static constexpr const char* kDemoBreak = "\n\n";

  Vocabulary() {
    for (const char* s : {kBos, kQuestion, kAnswer, kLineBreak, kDemoBreak}) add(s);
  }

  TokenId add(const std::string& word) {
    if (ids_.count(word)) throw GenerationError("duplicate vocabulary word '" + word + "'");
    ids_.emplace(word, static_cast<TokenId>(words_.size()));
    words_.push_back(word);
    return ids_.at(word);
  }

  TokenId id(const std::string& word) const {
    const auto it = ids_.find(word);
    if (it == ids_.end()) throw ContractError("word '" + word + "' is not in the vocabulary");
    return it->second;
  }
  bool contains(const std::string& word) const { return ids_.count(word) > 0; }
  bool contains(TokenId t) const { return t >= 0 && static_cast<std::size_t>(t) < words_.size(); }

  const std::string& word(TokenId t) const {
    if (!contains(t)) throw ContractError("token id " + std::to_string(t) + " is not in the vocabulary");
    return words_[static_cast<std::size_t>(t)];
  }
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  TokenId bos() const { return 0; }
  TokenId question() const { return 1; }
  TokenId answer() const { return 2; }
  TokenId line_break() const { return 3; }
  TokenId demo_break() const { return 4; }

  /// Renders tokens as text: words separated by single spaces, line breaks inline.
  std::string render(const std::vector<TokenId>& tokens) const {
    std::string out;
    bool prev_word = false;
    for (TokenId t : tokens) {
      const bool is_break = t == line_break() || t == demo_break();
      if (prev_word && !is_break) out += ' ';
      out += word(t);
      prev_word = !is_break;
    }
    return out;
  }

  bool operator==(const Vocabulary& o) const { return words_ == o.words_; }

  friend void to_json(nlohmann::json& j, const Vocabulary& v) { j = v.words_; }
  friend void from_json(const nlohmann::json& j, Vocabulary& v) {
    const auto words = j.get<std::vector<std::string>>();
    Vocabulary fresh;
    const std::vector<std::string> specials = fresh.words_;
    if (words.size() < specials.size() || !std::equal(specials.begin(), specials.end(), words.begin())) {
      throw ConfigError("vocabulary must begin with the special tokens");
    }
    for (std::size_t i = specials.size(); i < words.size(); ++i) fresh.add(words[i]);
    v = std::move(fresh);
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> ids_;
};

}  // namespace icl
