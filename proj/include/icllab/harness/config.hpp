#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "icllab/errors.hpp"
#include "icllab/interventions/effects.hpp"
#include "icllab/model/config.hpp"
#include "icllab/tasks/corpus.hpp"
#include "icllab/tasks/prompt.hpp"
#include "icllab/train/trainer.hpp"

namespace icl {

namespace fs = std::filesystem;

inline constexpr const char* kExperimentFormat = "icllab-experiment/1";
inline constexpr const char* kSuiteConfigFormat = "icllab-suite-config/1";
inline constexpr const char* kPretrainFormat = "icllab-pretrain/1";
inline constexpr const char* kRunRootVariable = "ICLLAB_RUN_ROOT";

struct ModelEntry {
  std::string name;
  std::string checkpoint;
  bool operator==(const ModelEntry&) const = default;
  NLOHMANN_DEFINE_TYPE_INTRUSIVE(ModelEntry, name, checkpoint)
};

struct InterventionParams {
  std::vector<double> p_grid{0.02, 0.04, 0.06, 0.08, 0.10, 0.12, 0.14, 0.16, 0.18, 0.20};
  std::size_t aie_k = 10;
  std::size_t aie_prompts = 25;        // corrupted prompts per task
  std::size_t fv_prompts = 100;        // reserved training queries per task
  std::size_t ablation_k = 10;
  std::size_t eval_limit = 0;          // test queries per task; 0 = all
  bool per_stream = true;              // also select within each stream
  bool layerwise = true;
  bool operator==(const InterventionParams&) const = default;
  NLOHMANN_DEFINE_TYPE_INTRUSIVE_WITH_DEFAULT(InterventionParams, p_grid, aie_k, aie_prompts, fv_prompts, ablation_k,
                                              eval_limit, per_stream, layerwise)
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string suite;
  std::vector<ModelEntry> models;
  std::vector<std::string> settings{"alpha_0", "alpha_25", "alpha_50", "alpha_75", "gold", "random", "flipped"};
  std::vector<std::size_t> ks{4, 8, 12, 16, 32};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t prompts_per_task = 0;  // test queries per task; 0 = all
  bool require_fitness = true;       // refuse checkpoints that fail the fitness gates
  EffectSpace effect_space = EffectSpace::probability;
  InterventionParams interventions;
  fs::path base_dir;  // directory relative paths resolve against; not serialized

  bool operator==(const ExperimentConfig& o) const {
    return name == o.name && suite == o.suite && models == o.models && settings == o.settings && ks == o.ks &&
           seeds == o.seeds && prompts_per_task == o.prompts_per_task &&
           require_fitness == o.require_fitness && effect_space == o.effect_space &&
           interventions == o.interventions;
  }

  /// Demonstration settings other than the no-demo baselines, which always run.
  std::vector<Setting> demo_settings() const {
    std::vector<Setting> out;
    for (const auto& s : settings) {
      const auto parsed = Setting::parse(s);
      if (parsed.kind != SettingKind::no_demo) out.push_back(parsed);
    }
    return out;
  }

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  }

  void validate() const {
    if (name.empty() || name.find('/') != std::string::npos) throw ConfigError("experiment name must be a plain word");
    if (suite.empty()) throw ConfigError("experiment needs a task suite path");
    if (models.empty()) throw ConfigError("experiment needs at least one model");
    std::set<std::string> names;
    for (const auto& m : models) {
      if (m.name.empty() || !names.insert(m.name).second) throw ConfigError("model names must be unique and nonempty");
    }
    if (ks.empty()) throw ConfigError("k list must be nonempty");
    static const std::set<std::size_t> allowed{0, 4, 8, 10, 12, 16, 32};
    for (auto k : ks)
      if (!allowed.count(k)) throw ConfigError("k = " + std::to_string(k) + " is not one of 0, 4, 8, 10, 12, 16, 32");
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    std::set<std::string> seen;
    for (const auto& s : settings) {
      Setting::parse(s);
      if (!seen.insert(s).second) throw ConfigError("setting '" + s + "' listed twice");
    }
    if (interventions.p_grid.empty()) throw ConfigError("p grid must be nonempty");
    for (double p : interventions.p_grid)
      if (!(p > 0 && p <= 0.2 + 1e-12)) throw ConfigError("p grid values must lie in (0, 0.2]");
    if (interventions.aie_k == 0 || interventions.ablation_k == 0) throw ConfigError("intervention k must be positive");
    if (interventions.aie_prompts == 0 || interventions.fv_prompts == 0)
      throw ConfigError("intervention prompt counts must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"format", kExperimentFormat},
       {"name", c.name},
       {"suite", c.suite},
       {"models", c.models},
       {"settings", c.settings},
       {"ks", c.ks},
       {"seeds", c.seeds},
       {"prompts_per_task", c.prompts_per_task},
       {"require_fitness", c.require_fitness},
       {"effect_space", c.effect_space},
       {"interventions", c.interventions}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  const ExperimentConfig d;
  if (j.value("format", std::string(kExperimentFormat)) != kExperimentFormat) {
    throw ConfigError("unsupported experiment format '" + j.at("format").get<std::string>() + "'");
  }
  c.name = j.value("name", d.name);
  c.suite = j.at("suite").get<std::string>();
  c.models = j.at("models").get<std::vector<ModelEntry>>();
  c.settings = j.value("settings", d.settings);
  c.ks = j.value("ks", d.ks);
  c.seeds = j.value("seeds", d.seeds);
  c.prompts_per_task = j.value("prompts_per_task", d.prompts_per_task);
  c.require_fitness = j.value("require_fitness", d.require_fitness);
  c.effect_space = j.value("effect_space", d.effect_space);
  c.interventions = j.value("interventions", d.interventions);
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

template <typename Config>
Config parse_config(const nlohmann::json& j, const fs::path& origin) {
  try {
    auto c = j.get<Config>();
    c.base_dir = origin.parent_path();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(origin.string() + ": " + e.what());
  }
}

inline ExperimentConfig load_experiment(const fs::path& path) {
  return parse_config<ExperimentConfig>(read_json(path), path);
}

/// Task-suite generation request.
struct SuiteConfig {
  std::uint64_t seed = 0;
  SuiteSpec spec;
  std::string output = "suite.json";
  fs::path base_dir;

  void validate() const {
    if (output.empty()) throw ConfigError("suite config needs an output path");
  }
  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  }
};

inline void to_json(nlohmann::json& j, const SuiteConfig& c) {
  j = {{"format", kSuiteConfigFormat}, {"seed", c.seed}, {"spec", c.spec}, {"output", c.output}};
}

inline void from_json(const nlohmann::json& j, SuiteConfig& c) {
  c.seed = j.value("seed", std::uint64_t{0});
  c.spec = j.value("spec", SuiteSpec{});
  c.output = j.value("output", std::string("suite.json"));
}

/// Corpus, model and optimizer settings of one pretraining run.
struct PretrainConfig {
  std::string suite;
  std::uint64_t corpus_seed = 0;
  std::size_t repetitions = 6;
  CorpusSpec corpus;
  ModelConfig model;  // vocab_size 0 = take it from the suite
  std::uint64_t init_seed = 0;
  TrainConfig train;
  std::string checkpoint;
  std::string log;
  fs::path base_dir;

  void validate() const {
    if (suite.empty()) throw ConfigError("pretrain config needs a suite path");
    if (checkpoint.empty()) throw ConfigError("pretrain config needs a checkpoint path");
    if (repetitions == 0) throw ConfigError("repetitions must be at least 1");
    train.validate();
  }
  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  }
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"format", kPretrainFormat}, {"suite", c.suite},     {"corpus_seed", c.corpus_seed},
       {"repetitions", c.repetitions}, {"corpus", c.corpus}, {"model", c.model},
       {"init_seed", c.init_seed},     {"train", c.train},   {"checkpoint", c.checkpoint},
       {"log", c.log}};
}

inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
  if (j.value("format", std::string(kPretrainFormat)) != kPretrainFormat) {
    throw ConfigError("unsupported pretrain config format");
  }
  c.suite = j.at("suite").get<std::string>();
  c.corpus_seed = j.value("corpus_seed", std::uint64_t{0});
  c.repetitions = j.value("repetitions", std::size_t{6});
  c.corpus = j.value("corpus", CorpusSpec{});
  c.model = j.at("model").get<ModelConfig>();
  c.init_seed = j.value("init_seed", std::uint64_t{0});
  c.train = j.value("train", TrainConfig{});
  c.checkpoint = j.at("checkpoint").get<std::string>();
  c.log = j.value("log", std::string());
}

/// $ICLLAB_RUN_ROOT if set, otherwise ./runs.
inline fs::path run_root() {
  const char* env = std::getenv(kRunRootVariable);
  return env && *env ? fs::path(env) : fs::path("runs");
}

inline fs::path run_directory(const ExperimentConfig& c) { return run_root() / c.name; }

}  // namespace icl
