#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "icllab/harness/behavioral.hpp"
#include "icllab/harness/config.hpp"
#include "icllab/harness/mechanistic.hpp"
#include "icllab/harness/report.hpp"
#include "icllab/model/checkpoint.hpp"
#include "icllab/train/fitness.hpp"

namespace icl {

/// Raised when a checkpoint fails the fitness gates an experiment requires.
class FitnessError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// The suite and models named by an experiment, loaded once.
class Workspace {
 public:
  explicit Workspace(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto suite_path = cfg_.resolve(cfg_.suite);
    if (!fs::exists(suite_path)) throw ConfigError("task suite not found: " + suite_path.string());
    suite_ = load_suite(suite_path);
    for (const auto& m : cfg_.models) {
      const auto path = cfg_.resolve(m.checkpoint);
      if (!fs::exists(path)) throw ConfigError("checkpoint for model '" + m.name + "' not found: " + path.string());
      auto model = std::make_unique<Model<float>>(load_model<float>(path));
      if (model->config().vocab_size != suite_.vocab.size()) {
        throw ConfigError("model '" + m.name + "' has vocabulary " + std::to_string(model->config().vocab_size) +
                          " but the suite has " + std::to_string(suite_.vocab.size()));
      }
      models_.push_back(std::move(model));
    }
  }

  /// Workspace over models already in memory; the suite path is not read.
  Workspace(ExperimentConfig cfg, TaskSuite suite, std::vector<std::unique_ptr<Model<float>>> models)
      : cfg_(std::move(cfg)), suite_(std::move(suite)), models_(std::move(models)) {
    cfg_.validate();
    if (models_.size() != cfg_.models.size()) throw ConfigError("one model per configured entry is required");
  }

  const ExperimentConfig& config() const { return cfg_; }
  const TaskSuite& suite() const { return suite_; }
  std::size_t size() const { return models_.size(); }
  const Model<float>& model(std::size_t i) const { return *models_.at(i); }
  const std::string& name(std::size_t i) const { return cfg_.models.at(i).name; }

  std::vector<NamedModel> named() const {
    std::vector<NamedModel> out;
    for (std::size_t i = 0; i < models_.size(); ++i) out.push_back({name(i), models_[i].get()});
    return out;
  }

  fs::path run_dir() const { return run_directory(cfg_); }

  /// Config snapshot with every path made absolute.
  nlohmann::json snapshot() const {
    auto c = cfg_;
    c.suite = fs::absolute(cfg_.resolve(cfg_.suite)).lexically_normal().string();
    for (auto& m : c.models) m.checkpoint = fs::absolute(cfg_.resolve(m.checkpoint)).lexically_normal().string();
    return c;
  }

  void write_snapshot() const { write_json(run_dir() / "config.json", snapshot()); }

  /// Runs the fitness gates on every model, writing fitness/<model>.txt.
  /// Throws FitnessError naming each failing model when fitness is required.
  std::vector<FitnessReport> check_fitness() const {
    std::vector<FitnessReport> out;
    std::string failed;
    for (std::size_t i = 0; i < models_.size(); ++i) {
      out.push_back(fitness_check(*models_[i], suite_));
      CsvTable::write_text(run_dir() / "fitness" / (name(i) + ".txt"), out.back().summary() + "\n");
      if (!out.back().pass()) failed += "\n  " + name(i) + ": " + out.back().summary();
    }
    if (cfg_.require_fitness && !failed.empty()) throw FitnessError("checkpoints failed the fitness gates:" + failed);
    return out;
  }

 private:
  ExperimentConfig cfg_;
  TaskSuite suite_;
  std::vector<std::unique_ptr<Model<float>>> models_;
};

inline const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> stages{Stage::fv,      Stage::aie,      Stage::steer,    Stage::ablate,
                                         Stage::overlap, Stage::negative, Stage::layerwise};
  return stages;
}

inline std::vector<Stage> configured_stages(const ExperimentConfig& cfg) {
  auto out = all_stages();
  if (!cfg.interventions.layerwise) out.erase(std::remove(out.begin(), out.end(), Stage::layerwise), out.end());
  return out;
}

/// Behavioral grid, preceded by the fitness gates when the config requires them.
inline EvalReport behave(const Workspace& ws) {
  ws.write_snapshot();
  if (ws.config().require_fitness) ws.check_fitness();
  auto report = run_behavioral(ws.config(), ws.suite(), ws.named());
  write_behavioral(report, ws.run_dir());
  return report;
}

/// Runs intervention stages for every model. AIE maps already on disk are
/// reused when the run directory's snapshot matches this configuration and
/// the aie stage itself was not requested.
inline std::vector<fs::path> intervene(const Workspace& ws, const std::vector<Stage>& stages) {
  const auto snap_path = ws.run_dir() / "config.json";
  const bool same_config = fs::exists(snap_path) && read_json(snap_path) == ws.snapshot();
  const bool reuse = same_config && std::find(stages.begin(), stages.end(), Stage::aie) == stages.end();
  ws.write_snapshot();
  std::vector<fs::path> files;
  for (std::size_t i = 0; i < ws.size(); ++i) {
    MechanisticRun run(ws.config(), ws.suite(), ws.name(i), ws.model(i));
    for (auto cat : kCategories) {
      const auto cached = ws.run_dir() / "interventions" / ws.name(i) / (std::string("aie_") + short_name(cat) + ".json");
      if (reuse && fs::exists(cached)) run.set_aie(cat, read_json(cached).get<AIEMap>());
    }
    const auto mine = write_interventions(run, ws.suite(), stages, ws.run_dir());
    files.insert(files.end(), mine.begin(), mine.end());
  }
  return files;
}

/// Fitness gate, behavioral grid, every intervention stage and the report.
inline ReportResult run_experiment(const Workspace& ws) {
  behave(ws);
  intervene(ws, configured_stages(ws.config()));
  return write_report(ws.run_dir());
}

}  // namespace icl
