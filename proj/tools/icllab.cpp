#include <chrono>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "icllab/harness/experiment.hpp"
#include "icllab/harness/pretraining.hpp"

namespace {

using icl::fs::path;
using nlohmann::json;

enum Exit : int { ok = 0, failed = 1, usage = 2 };

// "a.b.c=value"; value is parsed as JSON when possible, else taken as a string.
void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw icl::ConfigError("override '" + assignment + "' is not key=value");
  const auto key = assignment.substr(0, eq);
  const auto raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  std::string pointer;
  std::size_t start = 0;
  while (start <= key.size()) {
    const auto dot = key.find('.', start);
    pointer += "/" + key.substr(start, dot - start);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  doc[json::json_pointer(pointer)] = value;
}

json load_with_overrides(const path& file, const std::vector<std::string>& overrides) {
  auto doc = icl::read_json(file);
  for (const auto& o : overrides) apply_override(doc, o);
  return doc;
}

struct Common {
  std::string config;
  std::vector<std::string> set;
};

CLI::App* command(CLI::App& app, const std::string& name, const std::string& help, Common& c) {
  auto* sub = app.add_subcommand(name, help);
  sub->add_option("config", c.config, "JSON configuration file")->required()->check(CLI::ExistingFile);
  sub->add_option("--set", c.set, "override a config field, e.g. --set train.steps=200");
  return sub;
}

int gen_tasks(const Common& c, std::optional<std::uint64_t> seed, const std::string& output) {
  auto cfg = icl::parse_config<icl::SuiteConfig>(load_with_overrides(c.config, c.set), c.config);
  if (seed) cfg.seed = *seed;
  if (!output.empty()) cfg.output = output;
  const auto suite = icl::generate_task_suite(cfg.seed, cfg.spec);
  const auto out = cfg.resolve(cfg.output);
  icl::save_suite(suite, out);
  std::cout << "wrote " << out.string() << ": " << suite.tasks.size() << " tasks, vocabulary " << suite.vocab.size()
            << "\n";
  return ok;
}

int pretrain(const Common& c, std::optional<std::size_t> steps, const std::string& checkpoint, bool quiet) {
  auto cfg = icl::parse_config<icl::PretrainConfig>(load_with_overrides(c.config, c.set), c.config);
  if (steps) cfg.train.steps = *steps;
  if (!checkpoint.empty()) cfg.checkpoint = checkpoint;
  const auto t0 = std::chrono::steady_clock::now();
  const auto progress = [&](const icl::TrainLogRow& r) {
    if (quiet) return;
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "step " << r.step << "  loss " << r.loss << "  zero-shot " << r.zero_shot_acc << "  gold-icl "
              << r.gold_icl_acc << "  " << static_cast<long>(s) << "s\n";
  };
  const auto out = icl::run_pretraining(cfg, progress);
  std::cout << "wrote " << cfg.resolve(cfg.checkpoint).string() << " (" << out.documents << " documents, "
            << out.tokens << " tokens)\n"
            << out.fitness.summary() << "\n";
  return ok;
}

icl::ExperimentConfig experiment(const Common& c, const std::string& name) {
  auto cfg = icl::parse_config<icl::ExperimentConfig>(load_with_overrides(c.config, c.set), c.config);
  if (!name.empty()) cfg.name = name;
  cfg.validate();
  return cfg;
}

int fitness(const icl::Workspace& ws) {
  bool pass = true;
  try {
    for (const auto& r : ws.check_fitness()) pass = pass && r.pass();
  } catch (const icl::FitnessError&) {
    pass = false;
  }
  for (std::size_t i = 0; i < ws.size(); ++i)
    std::cout << ws.name(i) << ": " << icl::read_text(ws.run_dir() / "fitness" / (ws.name(i) + ".txt"));
  return pass ? ok : failed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-context learning laboratory: task generation, pretraining, evaluation and interventions"};
  app.require_subcommand(1);

  Common gen, pre, fit, beh, fv, aie, steer, ablate, overlap, neg, rep;
  std::optional<std::uint64_t> gen_seed;
  std::string gen_output;
  auto* gen_cmd = command(app, "gen-tasks", "generate a task suite", gen);
  gen_cmd->add_option("--seed", gen_seed, "suite seed");
  gen_cmd->add_option("--output", gen_output, "suite file to write");

  std::optional<std::size_t> steps;
  std::string checkpoint;
  bool quiet = false;
  auto* pre_cmd = command(app, "pretrain", "pretrain one model on the suite's corpus", pre);
  pre_cmd->add_option("--steps", steps, "optimizer steps");
  pre_cmd->add_option("--checkpoint", checkpoint, "checkpoint file to write");
  pre_cmd->add_flag("--quiet", quiet, "suppress progress lines");

  std::string name;
  const std::vector<std::pair<std::string, std::string>> experiment_commands{
      {"fitness", "check every model against the fitness gates"},
      {"behave", "run the behavioral grid"},
      {"extract-fv", "extract function vectors and category mean banks"},
      {"aie", "compute average indirect effects per head"},
      {"steer", "steering curves with non-FV controls and layer-wise steering"},
      {"ablate", "mean and zero ablation curves"},
      {"overlap", "overlap of top heads between categories"},
      {"neg-aie", "per-head drop under mean ablation"},
      {"report", "write summary.md, figures and index.json for a finished run"}};
  std::map<std::string, Common*> slots{{"fitness", &fit},  {"behave", &beh},   {"extract-fv", &fv},
                                       {"aie", &aie},      {"steer", &steer},  {"ablate", &ablate},
                                       {"overlap", &overlap}, {"neg-aie", &neg}, {"report", &rep}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& [cmd, help] : experiment_commands) {
    subs[cmd] = command(app, cmd, help, *slots[cmd]);
    subs[cmd]->add_option("--name", name, "experiment name (run directory under $ICLLAB_RUN_ROOT)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? ok : usage;
  }

  try {
    if (gen_cmd->parsed()) return gen_tasks(gen, gen_seed, gen_output);
    if (pre_cmd->parsed()) return pretrain(pre, steps, checkpoint, quiet);
    for (const auto& [cmd, sub] : subs) {
      if (!sub->parsed()) continue;
      const auto cfg = experiment(*slots[cmd], name);
      if (cmd == "report") {
        const auto r = icl::write_report(icl::run_directory(cfg));
        std::cout << "wrote " << r.summary.string() << " (" << r.artifacts.size() << " artifacts)\n";
        return ok;
      }
      const icl::Workspace ws(cfg);
      if (cmd == "fitness") return fitness(ws);
      if (cmd == "behave") {
        const auto r = icl::behave(ws);
        std::cout << "wrote " << r.rows.size() << " rows to " << (ws.run_dir() / "behavioral").string() << "\n";
        return ok;
      }
      static const std::map<std::string, std::vector<icl::Stage>> stages{
          {"extract-fv", {icl::Stage::fv}},
          {"aie", {icl::Stage::aie}},
          {"steer", {icl::Stage::steer, icl::Stage::layerwise}},
          {"ablate", {icl::Stage::ablate}},
          {"overlap", {icl::Stage::overlap}},
          {"neg-aie", {icl::Stage::negative}}};
      auto wanted = stages.at(cmd);
      if (!cfg.interventions.layerwise)
        wanted.erase(std::remove(wanted.begin(), wanted.end(), icl::Stage::layerwise), wanted.end());
      const auto files = icl::intervene(ws, wanted);
      std::cout << "wrote " << files.size() << " files under " << (ws.run_dir() / "interventions").string() << "\n";
      return ok;
    }
  } catch (const icl::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return usage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return failed;
  }
  return usage;
}
