#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "icllab/harness/behavioral.hpp"
#include "icllab/interventions/export.hpp"
#include "icllab/interventions/heads.hpp"
#include "icllab/interventions/patching.hpp"

namespace icl {

inline constexpr TaskCategory kCategories[] = {TaskCategory::retrieval, TaskCategory::contextual};

/// Category metric: the unweighted mean over the category's tasks.
struct CategoryScore {
  double accuracy = 0;
  double macro_f1 = 0;
};

struct SteeringRow {
  TaskCategory category = TaskCategory::retrieval;
  std::string selection;  // "top-p" or "non-FV"
  std::string stream;     // "all", "attention" or "ssm"
  double p = 0;
  std::uint64_t seed = 0;
  std::size_t n_heads = 0;
  CategoryScore score, baseline;
};

struct AblationRow {
  TaskCategory category = TaskCategory::retrieval;
  std::string selection;
  std::string mode;  // "mean" or "zero"
  double p = 0;
  std::uint64_t seed = 0;
  std::size_t n_heads = 0;
  CategoryScore score, unablated;
};

struct LayerRow {
  TaskCategory category = TaskCategory::retrieval;
  std::size_t layer = 0;
  std::uint64_t seed = 0;
  CategoryScore score, baseline;
};

struct OverlapRow {
  double p = 0;
  std::string stream;
  std::string pair;  // "retrieval-contextual", "retrieval-retrieval", ...
  std::size_t n_heads = 0;
  std::optional<double> percent;
};

inline const char* short_name(TaskCategory c) { return c == TaskCategory::retrieval ? "retrieval" : "contextual"; }

/// The intervention pipeline for one model. Banks, means and AIE maps are
/// computed on first use and memoized.
class MechanisticRun {
 public:
  MechanisticRun(const ExperimentConfig& cfg, const TaskSuite& suite, std::string model_name,
                 const Model<float>& model)
      : cfg_(cfg), suite_(suite), name_(std::move(model_name)), model_(model) {}

  const std::string& model_name() const { return name_; }
  const ModelConfig& model_config() const { return model_.config(); }
  std::uint64_t primary_seed() const { return cfg_.seeds.front(); }
  const std::vector<double>& p_grid() const { return cfg_.interventions.p_grid; }

  /// Stream scopes for selection: pooled, plus each stream on models that have both.
  std::vector<std::optional<Stream>> stream_scopes() const {
    std::vector<std::optional<Stream>> out{std::nullopt};
    if (!cfg_.interventions.per_stream) return out;
    bool attn = false, ssm = false;
    for (const auto& h : model_.config().all_heads()) (h.stream == Stream::attention ? attn : ssm) = true;
    if (attn && ssm) {
      out.push_back(Stream::attention);
      out.push_back(Stream::ssm);
    }
    return out;
  }

  /// Gold prompts with queries from the task's reserved training samples.
  std::vector<PromptInstance> reserve_prompts(const TaskSpec& task, const Setting& setting, std::size_t n,
                                              std::uint64_t seed) const {
    const auto& reserve = task.split.reserve;
    std::vector<std::size_t> queries(reserve.begin(), reserve.begin() + static_cast<std::ptrdiff_t>(
                                                                           std::min(n, reserve.size())));
    return prompts_over(task, queries, cfg_.interventions.aie_k, setting, derive_seed(seed, {hash_name("reserve")}));
  }

  const FunctionVectorBank<float>& function_vectors(const TaskSpec& task, std::uint64_t seed) {
    const auto key = std::make_pair(task.id, seed);
    auto it = fv_.find(key);
    if (it == fv_.end()) {
      const auto prompts = reserve_prompts(task, Setting::gold(), cfg_.interventions.fv_prompts, seed);
      it = fv_.emplace(key, extract_fv(model_, suite_.vocab, task, prompts)).first;
    }
    return it->second;
  }

  const MeanBank<float>& category_means(TaskCategory cat) {
    auto it = means_.find(cat);
    if (it == means_.end()) {
      std::vector<PromptInstance> all;
      for (const auto* t : suite_.of(cat)) {
        const auto ps = reserve_prompts(*t, Setting::gold(), cfg_.interventions.fv_prompts, primary_seed());
        all.insert(all.end(), ps.begin(), ps.end());
      }
      it = means_.emplace(cat, build_mean_bank(model_, suite_.vocab, cat, all)).first;
    }
    return it->second;
  }

  const AIEMap& aie(TaskCategory cat) {
    auto it = aie_.find(cat);
    if (it == aie_.end()) {
      std::vector<AIETaskInput<float>> inputs;
      for (const auto* t : suite_.of(cat)) {
        inputs.push_back({t->id, reserve_prompts(*t, Setting::random(), cfg_.interventions.aie_prompts, primary_seed()),
                          &function_vectors(*t, primary_seed())});
      }
      it = aie_.emplace(cat, compute_aie(model_, suite_.vocab, inputs, cfg_.effect_space, to_string(cat))).first;
    }
    return it->second;
  }

  void set_aie(TaskCategory cat, AIEMap map) { aie_[cat] = std::move(map); }

  std::vector<PromptInstance> test_prompts(const TaskSpec& task, std::size_t k, const Setting& s,
                                           std::uint64_t seed) const {
    return behavioral_prompts(task, s, k, seed, cfg_.interventions.eval_limit);
  }

  /// Steering from no-demo prompts with each task's own function vectors.
  CategoryScore steered(TaskCategory cat, const HeadSet& heads, std::uint64_t seed) {
    return over_tasks(cat, [&](const TaskSpec& t) {
      const auto& bank = function_vectors(t, seed);
      return evaluate_with(test_prompts(t, 0, Setting::no_demo(), seed), [&](const PromptInstance& p) {
        return steer(model_, suite_.vocab, p, heads, bank);
      });
    });
  }

  CategoryScore no_demo(TaskCategory cat, std::uint64_t seed) {
    return over_tasks(cat, [&](const TaskSpec& t) {
      return evaluate(model_, suite_.vocab, test_prompts(t, 0, Setting::no_demo(), seed));
    });
  }

  CategoryScore ablated(TaskCategory cat, const HeadSet& heads, AblationMode mode, std::uint64_t seed) {
    const auto* means = mode == AblationMode::mean ? &category_means(cat) : nullptr;
    return over_tasks(cat, [&](const TaskSpec& t) {
      return evaluate_with(test_prompts(t, cfg_.interventions.ablation_k, Setting::gold(), seed),
                           [&](const PromptInstance& p) { return ablate(model_, suite_.vocab, p, heads, mode, means); });
    });
  }

  CategoryScore gold(TaskCategory cat, std::uint64_t seed) {
    return over_tasks(cat, [&](const TaskSpec& t) {
      return evaluate(model_, suite_.vocab, test_prompts(t, cfg_.interventions.ablation_k, Setting::gold(), seed));
    });
  }

  HeadSet non_fv(TaskCategory cat, double p, std::optional<Stream> scope, std::uint64_t seed) {
    std::mt19937_64 rng(derive_seed(seed, {hash_name(to_string(cat)), hash_name("non-fv"),
                                           static_cast<std::uint64_t>(std::llround(p * 1000)),
                                           scope ? static_cast<std::uint64_t>(*scope) + 1 : 0}));
    return sample_non_fv_heads(aie(cat), p, rng, scope);
  }

  std::vector<SteeringRow> steering() {
    std::vector<SteeringRow> rows;
    for (auto cat : kCategories) {
      if (suite_.of(cat).empty()) continue;
      for (auto seed : cfg_.seeds) {
        const auto base = no_demo(cat, seed);
        std::map<std::vector<HeadAddress>, CategoryScore> memo;
        const auto score = [&](const HeadSet& s) {
          auto it = memo.find(s.heads);
          if (it == memo.end()) it = memo.emplace(s.heads, steered(cat, s, seed)).first;
          return it->second;
        };
        for (const auto& scope : stream_scopes()) {
          for (double p : cfg_.interventions.p_grid) {
            const auto top = top_p_heads(aie(cat), p, scope);
            rows.push_back({cat, "top-p", scope_name(scope), p, seed, top.size(), score(top), base});
            const auto control = non_fv(cat, p, scope, seed);
            rows.push_back({cat, "non-FV", scope_name(scope), p, seed, control.size(), score(control), base});
          }
        }
      }
    }
    return rows;
  }

  std::vector<AblationRow> ablation() {
    std::vector<AblationRow> rows;
    for (auto cat : kCategories) {
      if (suite_.of(cat).empty()) continue;
      for (auto seed : cfg_.seeds) {
        const auto intact = gold(cat, seed);
        for (double p : cfg_.interventions.p_grid) {
          const auto top = top_p_heads(aie(cat), p);
          const auto control = non_fv(cat, p, std::nullopt, seed);
          for (auto mode : {AblationMode::mean, AblationMode::zero}) {
            const char* m = mode == AblationMode::mean ? "mean" : "zero";
            rows.push_back({cat, "top-p", m, p, seed, top.size(), ablated(cat, top, mode, seed), intact});
            rows.push_back({cat, "non-FV", m, p, seed, control.size(), ablated(cat, control, mode, seed), intact});
          }
        }
      }
    }
    return rows;
  }

  std::vector<LayerRow> layerwise() {
    std::vector<LayerRow> rows;
    for (auto cat : kCategories) {
      if (suite_.of(cat).empty()) continue;
      for (auto seed : cfg_.seeds) {
        const auto base = no_demo(cat, seed);
        for (std::size_t l = 0; l < model_.config().n_layers; ++l)
          rows.push_back({cat, l, seed, steered(cat, layer_heads(model_, l), seed), base});
      }
    }
    return rows;
  }

  std::vector<OverlapRow> overlaps() {
    std::vector<OverlapRow> rows;
    if (suite_.of(TaskCategory::retrieval).empty() || suite_.of(TaskCategory::contextual).empty()) return rows;
    for (const auto& scope : stream_scopes()) {
      for (double p : cfg_.interventions.p_grid) {
        const auto r = top_p_heads(aie(TaskCategory::retrieval), p, scope);
        const auto c = top_p_heads(aie(TaskCategory::contextual), p, scope);
        rows.push_back({p, scope_name(scope), "retrieval-contextual", r.size(), overlap(r, c)});
        rows.push_back({p, scope_name(scope), "retrieval-retrieval", r.size(), overlap(r, r)});
        rows.push_back({p, scope_name(scope), "contextual-contextual", c.size(), overlap(c, c)});
      }
    }
    return rows;
  }

  std::map<HeadAddress, double> negative(TaskCategory cat) {
    std::vector<PromptInstance> prompts;
    for (const auto* t : suite_.of(cat)) {
      const auto ps = reserve_prompts(*t, Setting::gold(), cfg_.interventions.aie_prompts, primary_seed());
      prompts.insert(prompts.end(), ps.begin(), ps.end());
    }
    return negative_aie(model_, suite_.vocab, prompts, category_means(cat), cfg_.effect_space);
  }

  static std::string scope_name(const std::optional<Stream>& s) { return s ? std::string(to_string(*s)) : "all"; }

 private:
  template <typename EvalFn>
  CategoryScore over_tasks(TaskCategory cat, EvalFn&& eval) {
    const auto tasks = suite_.of(cat);
    if (tasks.empty()) throw ContractError(std::string("suite has no ") + to_string(cat) + " tasks");
    CategoryScore s;
    for (const auto* t : tasks) {
      const auto e = eval(*t);
      s.accuracy += e.accuracy;
      s.macro_f1 += e.macro_f1;
    }
    s.accuracy /= static_cast<double>(tasks.size());
    s.macro_f1 /= static_cast<double>(tasks.size());
    return s;
  }

  const ExperimentConfig& cfg_;
  const TaskSuite& suite_;
  std::string name_;
  const Model<float>& model_;
  std::map<std::pair<std::string, std::uint64_t>, FunctionVectorBank<float>> fv_;
  std::map<TaskCategory, MeanBank<float>> means_;
  std::map<TaskCategory, AIEMap> aie_;
};

inline CsvTable steering_csv(const std::string& model, const std::vector<SteeringRow>& rows) {
  CsvTable t({"model", "category", "selection", "stream", "p", "seed", "n_heads", "accuracy", "macro_f1",
              "no_demo_accuracy", "no_demo_macro_f1", "accuracy_gain", "macro_f1_gain"});
  for (const auto& r : rows)
    t.row() << model << to_string(r.category) << r.selection << r.stream << r.p << r.seed << r.n_heads
            << r.score.accuracy << r.score.macro_f1 << r.baseline.accuracy << r.baseline.macro_f1
            << r.score.accuracy - r.baseline.accuracy << r.score.macro_f1 - r.baseline.macro_f1;
  return t;
}

inline CsvTable ablation_csv(const std::string& model, const std::vector<AblationRow>& rows) {
  CsvTable t({"model", "category", "selection", "mode", "p", "seed", "n_heads", "accuracy", "macro_f1",
              "gold_accuracy", "gold_macro_f1", "accuracy_drop", "macro_f1_drop"});
  for (const auto& r : rows)
    t.row() << model << to_string(r.category) << r.selection << r.mode << r.p << r.seed << r.n_heads
            << r.score.accuracy << r.score.macro_f1 << r.unablated.accuracy << r.unablated.macro_f1
            << r.unablated.accuracy - r.score.accuracy << r.unablated.macro_f1 - r.score.macro_f1;
  return t;
}

inline CsvTable layerwise_csv(const std::string& model, const std::vector<LayerRow>& rows) {
  CsvTable t({"model", "category", "layer", "seed", "accuracy", "macro_f1", "no_demo_accuracy", "accuracy_gain"});
  for (const auto& r : rows)
    t.row() << model << to_string(r.category) << r.layer << r.seed << r.score.accuracy << r.score.macro_f1
            << r.baseline.accuracy << r.score.accuracy - r.baseline.accuracy;
  return t;
}

inline CsvTable overlap_csv(const std::string& model, const std::vector<OverlapRow>& rows) {
  CsvTable t({"model", "p", "stream", "pair", "n_heads", "overlap_percent"});
  for (const auto& r : rows) {
    auto& row = t.row();
    row << model << r.p << r.stream << r.pair << r.n_heads;
    if (r.percent) {
      row << *r.percent;
    } else {
      row << "";
    }
  }
  return t;
}

/// Mean over seeds of a per-seed metric, keyed by (category, label, p).
template <typename Row, typename LabelFn, typename ValueFn>
std::vector<svg::Series> seed_mean_series(const std::vector<Row>& rows, TaskCategory cat, LabelFn&& label,
                                          ValueFn&& value) {
  std::map<std::string, std::map<double, std::vector<double>>> acc;
  std::vector<std::string> order;
  for (const auto& r : rows) {
    if (r.category != cat) continue;
    const auto name = label(r);
    if (!acc.count(name)) order.push_back(name);
    acc[name][r.p].push_back(value(r));
  }
  std::vector<svg::Series> out;
  for (const auto& n : order) {
    svg::Series s{n, {}, {}};
    for (const auto& [p, vs] : acc[n]) {
      s.x.push_back(p);
      s.y.push_back(mean_sd(vs).mean);
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Stage names accepted by write_interventions.
enum class Stage { fv, aie, steer, ablate, overlap, negative, layerwise };

/// Runs the requested stages for one model and writes their artifacts under
/// interventions/<model>/. Returns the files written.
inline std::vector<fs::path> write_interventions(MechanisticRun& run, const TaskSuite& suite,
                                                 const std::vector<Stage>& stages, const fs::path& run_dir) {
  const auto dir = run_dir / "interventions" / run.model_name();
  std::vector<fs::path> files;
  const auto put = [&](const fs::path& rel, const std::string& text) {
    CsvTable::write_text(dir / rel, text);
    files.push_back(dir / rel);
  };
  const auto wants = [&](Stage s) { return std::find(stages.begin(), stages.end(), s) != stages.end(); };
  const auto& mc = run.model_config();
  const auto& m = run.model_name();
  std::vector<TaskCategory> cats;
  for (auto c : kCategories)
    if (!suite.of(c).empty()) cats.push_back(c);

  if (wants(Stage::fv)) {
    for (auto c : cats) {
      for (const auto* t : suite.of(c))
        put("banks/fv_" + t->id + ".json", nlohmann::json(run.function_vectors(*t, run.primary_seed())).dump() + "\n");
      put(std::string("banks/mean_") + short_name(c) + ".json", nlohmann::json(run.category_means(c)).dump() + "\n");
    }
  }
  if (wants(Stage::aie)) {
    for (auto c : cats) {
      const auto& map = run.aie(c);
      const auto grid = head_grid(mc, map.values);
      const std::string base = std::string("aie_") + short_name(c);
      put(base + ".json", nlohmann::json(map).dump(1) + "\n");
      put(base + ".csv", head_grid_csv(grid).str());
      put(base + ".svg", head_grid_svg(grid, m + ": AIE, " + to_string(c)));
      nlohmann::json sets = nlohmann::json::array();
      for (const auto& scope : run.stream_scopes())
        for (double p : run.p_grid()) sets.push_back(top_p_heads(map, p, scope));
      put(std::string("heads_") + short_name(c) + ".json", sets.dump(1) + "\n");
    }
  }
  if (wants(Stage::steer)) {
    const auto rows = run.steering();
    put("steering.csv", steering_csv(m, rows).str());
    for (auto c : cats) {
      const auto series = seed_mean_series(
          rows, c, [](const SteeringRow& r) { return r.selection + " (" + r.stream + ")"; },
          [](const SteeringRow& r) { return r.score.accuracy - r.baseline.accuracy; });
      put(std::string("steering_") + short_name(c) + ".svg",
          svg::line_chart(m + ": steering gain, " + to_string(c), "p (share of heads)", "accuracy gain", series));
    }
  }
  if (wants(Stage::layerwise)) {
    const auto rows = run.layerwise();
    put("layerwise.csv", layerwise_csv(m, rows).str());
    for (auto c : cats) {
      std::map<std::size_t, std::vector<double>> by_layer;
      for (const auto& r : rows)
        if (r.category == c) by_layer[r.layer].push_back(r.score.accuracy - r.baseline.accuracy);
      svg::Series s{"all heads of layer", {}, {}};
      for (const auto& [l, v] : by_layer) {
        s.x.push_back(static_cast<double>(l));
        s.y.push_back(mean_sd(v).mean);
      }
      put(std::string("layerwise_") + short_name(c) + ".svg",
          svg::line_chart(m + ": layer-wise steering, " + to_string(c), "layer", "accuracy gain", {s}));
    }
  }
  if (wants(Stage::ablate)) {
    const auto rows = run.ablation();
    put("ablation.csv", ablation_csv(m, rows).str());
    for (auto c : cats) {
      const auto series = seed_mean_series(
          rows, c, [](const AblationRow& r) { return r.selection + " " + r.mode; },
          [](const AblationRow& r) { return r.score.accuracy; });
      put(std::string("ablation_") + short_name(c) + ".svg",
          svg::line_chart(m + ": ablation, " + to_string(c), "p (share of heads)", "accuracy", series));
    }
  }
  if (wants(Stage::overlap)) put("overlap.csv", overlap_csv(m, run.overlaps()).str());
  if (wants(Stage::negative)) {
    for (auto c : cats) {
      const auto grid = head_grid(mc, run.negative(c));
      put(std::string("negative_aie_") + short_name(c) + ".csv", head_grid_csv(grid).str());
      put(std::string("negative_aie_") + short_name(c) + ".svg",
          head_grid_svg(grid, m + ": drop under mean ablation, " + to_string(c)));
    }
  }
  return files;
}

}  // namespace icl
