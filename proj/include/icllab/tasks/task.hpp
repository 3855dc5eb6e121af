#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "icllab/errors.hpp"
#include "icllab/tasks/vocab.hpp"

namespace icl {

enum class TaskCategory { retrieval, contextual };

inline const char* to_string(TaskCategory c) {
  return c == TaskCategory::retrieval ? "parametric-retrieval" : "contextual-understanding";
}

inline TaskCategory parse_category(const std::string& s) {
  if (s == "parametric-retrieval" || s == "retrieval") return TaskCategory::retrieval;
  if (s == "contextual-understanding" || s == "contextual") return TaskCategory::contextual;
  throw ConfigError("unknown task category '" + s + "'");
}

/// Sizes and proportions of a generated suite.
struct SuiteSpec {
  std::size_t n_retrieval = 17;
  std::size_t n_contextual = 16;
  std::size_t relations_per_domain = 4;  // retrieval tasks sharing one key pool and one value pool
  std::size_t pairs_per_task = 200;
  std::size_t contextual_samples = 400;
  std::size_t min_options = 2;
  std::size_t max_options = 3;
  std::size_t features_per_class = 8;
  std::size_t features_per_query = 1;
  std::size_t query_length = 3;
  std::size_t n_filler = 64;
  double test_fraction = 0.3;
  std::size_t aie_reserve = 100;
  std::size_t min_demo_pool = 32;
  std::size_t max_vocab = 4096;

  bool operator==(const SuiteSpec&) const = default;
  NLOHMANN_DEFINE_TYPE_INTRUSIVE_WITH_DEFAULT(SuiteSpec, n_retrieval, n_contextual, relations_per_domain,
                                              pairs_per_task, contextual_samples, min_options, max_options,
                                              features_per_class, features_per_query, query_length, n_filler,
                                              test_fraction, aie_reserve, min_demo_pool, max_vocab)
};

/// One question with the index of its correct option.
struct Sample {
  std::vector<TokenId> question;
  std::size_t answer = 0;
  bool operator==(const Sample&) const = default;
  NLOHMANN_DEFINE_TYPE_INTRUSIVE(Sample, question, answer)
};

/// Indices into TaskSpec::samples. `reserve` and `demo_pool` partition `train`.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  std::vector<std::size_t> reserve;
  std::vector<std::size_t> demo_pool;
  bool operator==(const Split&) const = default;
  NLOHMANN_DEFINE_TYPE_INTRUSIVE(Split, train, test, reserve, demo_pool)
};

struct TaskSpec {
  std::string id;
  TaskCategory category = TaskCategory::retrieval;
  std::size_t domain = 0;           // retrieval: index of the shared key/value pool
  TokenId cue = -1;                 // retrieval: relation word used in fact sheets
  std::vector<TokenId> options;     // single-token options; first tokens are unique
  std::vector<std::vector<TokenId>> feature_classes;  // contextual: feature words per option class
  std::vector<Sample> samples;
  Split split;

  bool operator==(const TaskSpec&) const = default;

  std::size_t n_options() const { return options.size(); }
  TokenId answer_token(const Sample& s) const { return options.at(s.answer); }

  /// Key token to value token for retrieval tasks.
  std::map<TokenId, TokenId> mapping() const {
    if (category != TaskCategory::retrieval) throw ContractError("task '" + id + "' has no key/value mapping");
    std::map<TokenId, TokenId> m;
    for (const auto& s : samples) m.emplace(s.question.front(), options.at(s.answer));
    return m;
  }

  /// Majority class of the feature words in a question; ties go to the lower class.
  std::size_t classify(const std::vector<TokenId>& question) const {
    std::vector<std::size_t> votes(feature_classes.size(), 0);
    for (TokenId t : question)
      for (std::size_t c = 0; c < feature_classes.size(); ++c)
        if (std::find(feature_classes[c].begin(), feature_classes[c].end(), t) != feature_classes[c].end()) ++votes[c];
    return static_cast<std::size_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  }
};

inline void to_json(nlohmann::json& j, const TaskSpec& t) {
  j = {{"id", t.id},         {"category", to_string(t.category)}, {"domain", t.domain},
       {"cue", t.cue},       {"options", t.options},              {"feature_classes", t.feature_classes},
       {"samples", t.samples}, {"split", t.split}};
}

inline void from_json(const nlohmann::json& j, TaskSpec& t) {
  t.id = j.at("id").get<std::string>();
  t.category = parse_category(j.at("category").get<std::string>());
  t.domain = j.at("domain").get<std::size_t>();
  t.cue = j.at("cue").get<TokenId>();
  t.options = j.at("options").get<std::vector<TokenId>>();
  t.feature_classes = j.at("feature_classes").get<std::vector<std::vector<TokenId>>>();
  t.samples = j.at("samples").get<std::vector<Sample>>();
  t.split = j.at("split").get<Split>();
}

struct TaskSuite {
  SuiteSpec spec;
  std::uint64_t seed = 0;
  Vocabulary vocab;
  std::vector<TokenId> filler;
  std::vector<TaskSpec> tasks;

  bool operator==(const TaskSuite&) const = default;

  const TaskSpec& task(const std::string& id) const {
    for (const auto& t : tasks)
      if (t.id == id) return t;
    throw ConfigError("no task named '" + id + "' in suite");
  }
  std::vector<const TaskSpec*> of(TaskCategory c) const {
    std::vector<const TaskSpec*> out;
    for (const auto& t : tasks)
      if (t.category == c) out.push_back(&t);
    return out;
  }
};

inline void to_json(nlohmann::json& j, const TaskSuite& s) {
  j = {{"format", "icllab-suite/1"}, {"seed", s.seed}, {"spec", s.spec}, {"vocab", s.vocab},
       {"filler", s.filler},         {"tasks", s.tasks}};
}

inline void from_json(const nlohmann::json& j, TaskSuite& s) {
  if (j.value("format", "") != "icllab-suite/1") throw ConfigError("not an icllab task suite");
  s.seed = j.at("seed").get<std::uint64_t>();
  s.spec = j.at("spec").get<SuiteSpec>();
  s.vocab = j.at("vocab").get<Vocabulary>();
  s.filler = j.at("filler").get<std::vector<TokenId>>();
  s.tasks = j.at("tasks").get<std::vector<TaskSpec>>();
}

inline void save_suite(const TaskSuite& suite, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << nlohmann::json(suite).dump(1) << '\n';
}

inline TaskSuite load_suite(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read task suite " + path.string());
  try {
    return nlohmann::json::parse(in).get<TaskSuite>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed task suite " + path.string() + ": " + e.what());
  }
}

namespace detail {

inline std::string numbered(const std::string& stem, std::size_t i, int width = 3) {
  std::string n = std::to_string(i);
  if (n.size() < static_cast<std::size_t>(width)) n.insert(0, static_cast<std::size_t>(width) - n.size(), '0');
  return stem + n;
}

inline Split make_split(std::size_t n, const SuiteSpec& spec, std::mt19937_64& rng, const std::string& task_id) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(spec.test_fraction * static_cast<double>(n)));
  if (n_test == 0 || n_test >= n) throw GenerationError("task '" + task_id + "' leaves no test or train samples");
  Split s;
  s.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  if (s.train.size() < spec.aie_reserve + spec.min_demo_pool) {
    throw GenerationError("task '" + task_id + "' has " + std::to_string(s.train.size()) +
                          " training samples; need " + std::to_string(spec.aie_reserve) + " reserved + " +
                          std::to_string(spec.min_demo_pool) + " for demonstrations");
  }
  s.reserve.assign(s.train.begin(), s.train.begin() + static_cast<std::ptrdiff_t>(spec.aie_reserve));
  s.demo_pool.assign(s.train.begin() + static_cast<std::ptrdiff_t>(spec.aie_reserve), s.train.end());
  for (auto* v : {&s.train, &s.test, &s.reserve, &s.demo_pool}) std::sort(v->begin(), v->end());
  return s;
}

/// Swaps held-out samples into the demonstration pool until every feature
/// word occurs in some training query. Only pool samples whose words all stay
/// covered are swapped out; splits that already cover every feature are kept.
inline void cover_features(TaskSpec& t) {
  auto& s = t.split;
  std::map<TokenId, std::size_t> in_train;
  for (auto i : s.train)
    for (auto w : t.samples[i].question) ++in_train[w];
  const auto has = [&](std::size_t i, TokenId w) {
    const auto& q = t.samples[i].question;
    return std::find(q.begin(), q.end(), w) != q.end();
  };
  for (const auto& cls : t.feature_classes) {
    for (TokenId f : cls) {
      if (in_train[f] > 0) continue;
      const auto in = std::find_if(s.test.begin(), s.test.end(), [&](std::size_t i) { return has(i, f); });
      if (in == s.test.end()) continue;
      const auto out = std::find_if(s.demo_pool.rbegin(), s.demo_pool.rend(), [&](std::size_t i) {
        return std::all_of(t.samples[i].question.begin(), t.samples[i].question.end(),
                           [&](TokenId w) { return in_train[w] > 1; });
      });
      if (out == s.demo_pool.rend()) throw GenerationError("task '" + t.id + "' cannot cover feature words in training");
      for (auto w : t.samples[*out].question) --in_train[w];
      for (auto w : t.samples[*in].question) ++in_train[w];
      *std::find(s.train.begin(), s.train.end(), *out) = *in;
      std::swap(*in, *out);
    }
  }
  for (auto* v : {&s.train, &s.test, &s.demo_pool}) std::sort(v->begin(), v->end());
}

inline std::size_t required_vocab(const SuiteSpec& spec) {
  const std::size_t domains = (spec.n_retrieval + spec.relations_per_domain - 1) / spec.relations_per_domain;
  return 5 + spec.n_filler + domains * 2 * spec.pairs_per_task + spec.n_retrieval +
         spec.n_contextual * spec.max_options * (1 + spec.features_per_class);
}

inline void validate(const SuiteSpec& spec) {
  if (spec.pairs_per_task < 60) throw GenerationError("retrieval tasks need at least 60 pairs");
  if (spec.relations_per_domain == 0) throw GenerationError("relations_per_domain must be positive");
  if (spec.relations_per_domain > spec.pairs_per_task) {
    throw GenerationError("more relations per domain than values to map them to");
  }
  if (spec.min_options < 2 || spec.max_options < spec.min_options) {
    throw GenerationError("contextual tasks need 2 <= min_options <= max_options");
  }
  if (spec.features_per_class == 0) throw GenerationError("features_per_class must be positive");
  if (spec.features_per_query == 0 || spec.features_per_query > spec.query_length) {
    throw GenerationError("features_per_query must be in [1, query_length]");
  }
  if (spec.features_per_query < spec.query_length && spec.n_filler == 0) {
    throw GenerationError("queries need filler words");
  }
  if (!(spec.test_fraction > 0.0 && spec.test_fraction < 1.0)) throw GenerationError("test_fraction must be in (0, 1)");
  const auto need = required_vocab(spec);
  if (need > spec.max_vocab) {
    throw GenerationError("suite needs " + std::to_string(need) + " vocabulary words but max_vocab is " +
                          std::to_string(spec.max_vocab));
  }
}

// Relations in one domain are bijections keys -> values that disagree on
// every key: value(r, i) = values[perm_v[(perm_k[i] + shift_r) mod n]] with
// distinct shifts.
inline void add_retrieval_domain(TaskSuite& suite, std::size_t domain, std::size_t n_relations, std::size_t first_task,
                                 std::mt19937_64& rng) {
  const auto& spec = suite.spec;
  const std::size_t n = spec.pairs_per_task;
  const std::string tag = numbered("", domain, 2);
  std::vector<TokenId> keys, values;
  for (std::size_t i = 0; i < n; ++i) keys.push_back(suite.vocab.add("key" + tag + "_" + numbered("", i)));
  for (std::size_t i = 0; i < n; ++i) values.push_back(suite.vocab.add("val" + tag + "_" + numbered("", i)));
  std::vector<std::size_t> perm_k(n), perm_v(n), shifts(n);
  std::iota(perm_k.begin(), perm_k.end(), 0);
  std::iota(perm_v.begin(), perm_v.end(), 0);
  std::iota(shifts.begin(), shifts.end(), 0);
  std::shuffle(perm_k.begin(), perm_k.end(), rng);
  std::shuffle(perm_v.begin(), perm_v.end(), rng);
  std::shuffle(shifts.begin(), shifts.end(), rng);
  for (std::size_t r = 0; r < n_relations; ++r) {
    TaskSpec t;
    t.id = numbered("retrieval_", first_task + r, 2);
    t.category = TaskCategory::retrieval;
    t.domain = domain;
    t.cue = suite.vocab.add(numbered("rel", first_task + r, 2));
    t.options = values;  // ids ascend with the zero-padded words, so this is the sorted answer set
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t v = perm_v[(perm_k[i] + shifts[r]) % n];
      t.samples.push_back({{keys[i]}, v});
    }
    t.split = make_split(n, spec, rng, t.id);
    suite.tasks.push_back(std::move(t));
  }
}

inline void add_contextual_task(TaskSuite& suite, std::size_t index, std::mt19937_64& rng) {
  const auto& spec = suite.spec;
  TaskSpec t;
  t.id = numbered("contextual_", index, 2);
  t.category = TaskCategory::contextual;
  const std::size_t m =
      spec.min_options + std::uniform_int_distribution<std::size_t>(0, spec.max_options - spec.min_options)(rng);
  const std::string tag = numbered("", index, 2);
  for (std::size_t c = 0; c < m; ++c) t.options.push_back(suite.vocab.add("lab" + tag + "_" + char('a' + c)));
  std::vector<TokenId> all_features;
  t.feature_classes.resize(m);
  for (std::size_t c = 0; c < m; ++c)
    for (std::size_t f = 0; f < spec.features_per_class; ++f) {
      const auto id = suite.vocab.add("feat" + tag + "_" + char('a' + c) + std::to_string(f));
      t.feature_classes[c].push_back(id);
      all_features.push_back(id);
    }

  std::set<std::vector<TokenId>> seen;
  std::uniform_int_distribution<std::size_t> pick_class(0, m - 1), pick_feat(0, spec.features_per_class - 1),
      pick_any(0, all_features.size() - 1), pick_filler(0, spec.n_filler == 0 ? 0 : spec.n_filler - 1);
  const std::size_t budget = 50 * spec.contextual_samples + 1000;
  for (std::size_t attempt = 0; t.samples.size() < spec.contextual_samples; ++attempt) {
    if (attempt >= budget) {
      throw GenerationError("could not generate " + std::to_string(spec.contextual_samples) +
                            " distinct queries for " + t.id + "; enlarge filler or feature sets");
    }
    std::vector<TokenId> q(spec.query_length);
    for (auto& w : q) w = spec.n_filler ? suite.filler[pick_filler(rng)] : all_features.front();
    std::vector<std::size_t> slots(spec.query_length);
    std::iota(slots.begin(), slots.end(), 0);
    std::shuffle(slots.begin(), slots.end(), rng);
    // A single feature is drawn class-first so labels are balanced.
    if (spec.features_per_query == 1) {
      q[slots[0]] = t.feature_classes[pick_class(rng)][pick_feat(rng)];
    } else {
      for (std::size_t f = 0; f < spec.features_per_query; ++f) q[slots[f]] = all_features[pick_any(rng)];
    }
    if (!seen.insert(q).second) continue;
    const auto label = t.classify(q);
    t.samples.push_back({std::move(q), label});
  }
  t.split = make_split(t.samples.size(), spec, rng, t.id);
  cover_features(t);
  suite.tasks.push_back(std::move(t));
}

}  // namespace detail

/// Builds a deterministic suite of retrieval and contextual tasks from `seed`.
inline TaskSuite generate_task_suite(std::uint64_t seed, const SuiteSpec& spec) {
  detail::validate(spec);
  TaskSuite suite;
  suite.spec = spec;
  suite.seed = seed;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < spec.n_filler; ++i) suite.filler.push_back(suite.vocab.add(detail::numbered("w", i)));
  for (std::size_t first = 0, domain = 0; first < spec.n_retrieval; first += spec.relations_per_domain, ++domain) {
    detail::add_retrieval_domain(suite, domain, std::min(spec.relations_per_domain, spec.n_retrieval - first), first,
                                 rng);
  }
  for (std::size_t i = 0; i < spec.n_contextual; ++i) detail::add_contextual_task(suite, i, rng);
  return suite;
}

inline TaskSuite generate_task_suite(std::uint64_t seed, std::size_t n_retrieval, std::size_t n_contextual,
                                     SuiteSpec sizes = {}) {
  sizes.n_retrieval = n_retrieval;
  sizes.n_contextual = n_contextual;
  return generate_task_suite(seed, sizes);
}

}  // namespace icl
