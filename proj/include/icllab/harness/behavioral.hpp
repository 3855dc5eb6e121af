#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "icllab/harness/config.hpp"
#include "icllab/harness/evaluate.hpp"
#include "icllab/io/csv.hpp"
#include "icllab/io/svg.hpp"
#include "icllab/seeding.hpp"

namespace icl {

/// Metrics of one (model, task, setting, k, seed) cell.
struct EvalRow {
  std::string model;
  std::string task;
  TaskCategory category = TaskCategory::retrieval;
  std::string setting;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::size_t n_prompts = 0;
  double accuracy = 0;
  double macro_f1 = 0;
  bool operator==(const EvalRow&) const = default;
};

/// Mean and sample standard deviation across seeds. `scope` is a task id, or
/// a category name for rows averaged over the category's tasks first.
struct SummaryRow {
  std::string model;
  std::string scope;
  TaskCategory category = TaskCategory::retrieval;
  std::string setting;
  std::size_t k = 0;
  std::size_t n_seeds = 0;
  double accuracy_mean = 0, accuracy_sd = 0;
  double macro_f1_mean = 0, macro_f1_sd = 0;
};

/// A condition's metric minus its matched no-demo metric.
struct GainRecord {
  std::string model;
  std::string task;
  TaskCategory category = TaskCategory::retrieval;
  std::string setting;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::string baseline;
  double accuracy = 0, baseline_accuracy = 0, accuracy_gain = 0;
  double macro_f1 = 0, baseline_macro_f1 = 0, macro_f1_gain = 0;
};

struct PredictionRecord {
  std::string model;
  std::string task;
  std::string setting;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::size_t query_sample = 0;
  std::size_t prediction = 0;
  std::size_t correct_option = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<SummaryRow> per_task;
  std::vector<SummaryRow> per_category;
  std::vector<GainRecord> gains;
  std::vector<PredictionRecord> predictions;
};

struct MeanSd {
  double mean = 0;
  double sd = 0;
};

/// Sample standard deviation (n - 1); zero for a single value.
inline MeanSd mean_sd(const std::vector<double>& xs) {
  if (xs.empty()) throw ContractError("mean of an empty set");
  MeanSd r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

/// Settings evaluated on a task, baselines first. Flipped conditions run on
/// contextual tasks only and bring their flipped no-demo baseline with them.
inline std::vector<Setting> settings_for(const TaskSpec& task, const std::vector<Setting>& demo_settings) {
  std::vector<Setting> out{Setting::no_demo()};
  bool flips = false;
  for (const auto& s : demo_settings) flips = flips || s.kind == SettingKind::flipped;
  const bool contextual = task.category == TaskCategory::contextual;
  if (flips && contextual) out.push_back(Setting::no_demo(true));
  for (const auto& s : demo_settings)
    if (s.kind != SettingKind::flipped || contextual) out.push_back(s);
  return out;
}

/// One prompt per test query (at most `limit`, 0 = all). The demonstration
/// draw depends on (seed, task, k, query) but not on the setting.
inline std::vector<PromptInstance> behavioral_prompts(const TaskSpec& task, const Setting& setting, std::size_t k,
                                                      std::uint64_t seed, std::size_t limit) {
  PromptOptions o;
  if (setting.kind == SettingKind::flipped || setting.flipped_labels) o.flip = make_flip_map(task, seed);
  const auto& queries = task.split.test;
  const auto n = limit ? std::min(limit, queries.size()) : queries.size();
  std::vector<PromptInstance> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    o.query_sample = queries[i];
    out.push_back(build_prompt(task, k, setting, derive_seed(seed, {hash_name(task.id), k, i}), o));
  }
  return out;
}

/// Gains of every demonstration row against the matched no-demo row of the
/// same (model, task, seed); flipped rows use the flipped no-demo row.
inline std::vector<GainRecord> compute_gains(const std::vector<EvalRow>& rows) {
  std::map<std::tuple<std::string, std::string, std::uint64_t, std::string>, const EvalRow*> base;
  for (const auto& r : rows)
    if (r.k == 0) base[{r.model, r.task, r.seed, r.setting}] = &r;
  std::vector<GainRecord> out;
  for (const auto& r : rows) {
    if (r.k == 0) continue;
    const std::string b = r.setting == "flipped" ? "no_demo_flipped" : "no_demo";
    const auto it = base.find({r.model, r.task, r.seed, b});
    if (it == base.end()) throw ContractError("no " + b + " row for " + r.model + "/" + r.task);
    const auto& z = *it->second;
    out.push_back({r.model, r.task, r.category, r.setting, r.k, r.seed, b, r.accuracy, z.accuracy,
                   r.accuracy - z.accuracy, r.macro_f1, z.macro_f1, r.macro_f1 - z.macro_f1});
  }
  return out;
}

/// Per-task and per-category mean +/- sd across seeds. Category values are
/// first averaged over tasks within each seed.
inline void summarize(EvalReport& report) {
  using Key = std::tuple<std::string, std::string, std::string, std::size_t>;
  std::map<Key, std::vector<const EvalRow*>> by_task;
  std::vector<Key> task_order;
  std::map<std::tuple<std::string, int, std::string, std::size_t, std::uint64_t>, std::vector<const EvalRow*>> by_seed;
  std::vector<std::tuple<std::string, int, std::string, std::size_t>> cat_order;
  std::map<std::tuple<std::string, int, std::string, std::size_t>, std::vector<std::uint64_t>> cat_seeds;
  for (const auto& r : report.rows) {
    const Key key{r.model, r.task, r.setting, r.k};
    if (!by_task.count(key)) task_order.push_back(key);
    by_task[key].push_back(&r);
    const std::tuple<std::string, int, std::string, std::size_t> ck{r.model, static_cast<int>(r.category), r.setting,
                                                                     r.k};
    if (!cat_seeds.count(ck)) cat_order.push_back(ck);
    auto& seeds = cat_seeds[ck];
    if (std::find(seeds.begin(), seeds.end(), r.seed) == seeds.end()) seeds.push_back(r.seed);
    by_seed[{r.model, static_cast<int>(r.category), r.setting, r.k, r.seed}].push_back(&r);
  }
  report.per_task.clear();
  for (const auto& key : task_order) {
    const auto& rs = by_task[key];
    std::vector<double> acc, f1;
    for (const auto* r : rs) {
      acc.push_back(r->accuracy);
      f1.push_back(r->macro_f1);
    }
    const auto a = mean_sd(acc), f = mean_sd(f1);
    report.per_task.push_back({rs.front()->model, rs.front()->task, rs.front()->category, rs.front()->setting,
                               rs.front()->k, rs.size(), a.mean, a.sd, f.mean, f.sd});
  }
  report.per_category.clear();
  for (const auto& ck : cat_order) {
    const auto& [model, cat, setting, k] = ck;
    std::vector<double> acc, f1;
    for (auto seed : cat_seeds[ck]) {
      const auto& rs = by_seed[{model, cat, setting, k, seed}];
      double sa = 0, sf = 0;
      for (const auto* r : rs) {
        sa += r->accuracy;
        sf += r->macro_f1;
      }
      acc.push_back(sa / static_cast<double>(rs.size()));
      f1.push_back(sf / static_cast<double>(rs.size()));
    }
    const auto a = mean_sd(acc), f = mean_sd(f1);
    const auto category = static_cast<TaskCategory>(cat);
    report.per_category.push_back(
        {model, to_string(category), category, setting, k, acc.size(), a.mean, a.sd, f.mean, f.sd});
  }
}

struct NamedModel {
  std::string name;
  const Model<float>* model = nullptr;
};

/// Full grid over (model, task, setting, k, seed).
inline EvalReport run_behavioral(const ExperimentConfig& cfg, const TaskSuite& suite,
                                 const std::vector<NamedModel>& models) {
  const auto demo = cfg.demo_settings();
  EvalReport report;
  for (const auto& nm : models) {
    for (const auto& task : suite.tasks) {
      for (const auto& setting : settings_for(task, demo)) {
        const bool baseline = setting.kind == SettingKind::no_demo;
        const std::vector<std::size_t> ks = baseline ? std::vector<std::size_t>{0} : cfg.ks;
        for (auto k : ks) {
          if (k == 0 && !baseline) continue;  // k = 0 is the no-demo row
          for (auto seed : cfg.seeds) {
            const auto prompts = behavioral_prompts(task, setting, k, seed, cfg.prompts_per_task);
            const auto e = evaluate(*nm.model, suite.vocab, prompts);
            report.rows.push_back({nm.name, task.id, task.category, setting.name(), k, seed, prompts.size(),
                                   e.accuracy, e.macro_f1});
            for (std::size_t i = 0; i < prompts.size(); ++i) {
              report.predictions.push_back({nm.name, task.id, setting.name(), k, seed, prompts[i].query_sample,
                                            e.predictions[i], e.golds[i]});
            }
          }
        }
      }
    }
  }
  report.gains = compute_gains(report.rows);
  summarize(report);
  return report;
}

inline CsvTable rows_csv(const std::vector<EvalRow>& rows) {
  CsvTable t({"model", "task", "category", "setting", "k", "seed", "n_prompts", "accuracy", "macro_f1"});
  for (const auto& r : rows)
    t.row() << r.model << r.task << to_string(r.category) << r.setting << r.k << r.seed << r.n_prompts << r.accuracy
            << r.macro_f1;
  return t;
}

inline CsvTable summary_csv(const std::vector<SummaryRow>& rows, const char* scope_name) {
  CsvTable t({"model", scope_name, "category", "setting", "k", "n_seeds", "accuracy_mean", "accuracy_sd",
              "macro_f1_mean", "macro_f1_sd"});
  for (const auto& r : rows)
    t.row() << r.model << r.scope << to_string(r.category) << r.setting << r.k << r.n_seeds << r.accuracy_mean
            << r.accuracy_sd << r.macro_f1_mean << r.macro_f1_sd;
  return t;
}

inline CsvTable gains_csv(const std::vector<GainRecord>& gains) {
  CsvTable t({"model", "task", "category", "setting", "k", "seed", "baseline", "accuracy", "baseline_accuracy",
              "accuracy_gain", "macro_f1", "baseline_macro_f1", "macro_f1_gain"});
  for (const auto& g : gains)
    t.row() << g.model << g.task << to_string(g.category) << g.setting << g.k << g.seed << g.baseline << g.accuracy
            << g.baseline_accuracy << g.accuracy_gain << g.macro_f1 << g.baseline_macro_f1 << g.macro_f1_gain;
  return t;
}

/// Per (model, category, setting, k): gain averaged over tasks within each
/// seed, then mean +/- sd across seeds.
inline CsvTable gain_summary_csv(const std::vector<GainRecord>& gains) {
  using Key = std::tuple<std::string, int, std::string, std::size_t>;
  std::map<Key, std::map<std::uint64_t, std::pair<std::vector<double>, std::vector<double>>>> acc;
  std::vector<Key> order;
  for (const auto& g : gains) {
    const Key key{g.model, static_cast<int>(g.category), g.setting, g.k};
    if (!acc.count(key)) order.push_back(key);
    auto& cell = acc[key][g.seed];
    cell.first.push_back(g.accuracy_gain);
    cell.second.push_back(g.macro_f1_gain);
  }
  CsvTable t({"model", "category", "setting", "k", "n_seeds", "accuracy_gain_mean", "accuracy_gain_sd",
              "macro_f1_gain_mean", "macro_f1_gain_sd"});
  for (const auto& key : order) {
    std::vector<double> a, f;
    for (const auto& [seed, cell] : acc[key]) {
      a.push_back(mean_sd(cell.first).mean);
      f.push_back(mean_sd(cell.second).mean);
    }
    const auto ma = mean_sd(a), mf = mean_sd(f);
    t.row() << std::get<0>(key) << to_string(static_cast<TaskCategory>(std::get<1>(key))) << std::get<2>(key)
            << std::get<3>(key) << a.size() << ma.mean << ma.sd << mf.mean << mf.sd;
  }
  return t;
}

namespace detail {

inline int alpha_of(const std::string& setting) {
  if (setting == "gold") return 100;
  if (setting.rfind("alpha_", 0) == 0) return std::stoi(setting.substr(6));
  return -1;
}

inline const SummaryRow* find_summary(const std::vector<SummaryRow>& rows, const std::string& model,
                                      TaskCategory cat, const std::string& setting, std::size_t k) {
  for (const auto& r : rows)
    if (r.model == model && r.category == cat && r.setting == setting && r.k == k) return &r;
  return nullptr;
}

}  // namespace detail

/// Category accuracy against the share of correct demonstrations.
inline CsvTable alpha_curve_csv(const EvalReport& r) {
  CsvTable t({"model", "category", "k", "alpha", "accuracy_mean", "accuracy_sd", "macro_f1_mean", "macro_f1_sd"});
  for (const auto& s : r.per_category) {
    const int a = detail::alpha_of(s.setting);
    if (a < 0) continue;
    t.row() << s.model << s.scope << s.k << a << s.accuracy_mean << s.accuracy_sd << s.macro_f1_mean
            << s.macro_f1_sd;
  }
  return t;
}

/// Flipped-label accuracy on contextual tasks next to its flipped no-demo baseline.
inline CsvTable flipped_curve_csv(const EvalReport& r) {
  CsvTable t({"model", "k", "flipped_accuracy_mean", "flipped_accuracy_sd", "baseline_accuracy_mean",
              "accuracy_gain", "flipped_macro_f1_mean", "baseline_macro_f1_mean"});
  for (const auto& s : r.per_category) {
    if (s.setting != "flipped") continue;
    const auto* b = detail::find_summary(r.per_category, s.model, s.category, "no_demo_flipped", 0);
    if (!b) continue;
    t.row() << s.model << s.k << s.accuracy_mean << s.accuracy_sd << b->accuracy_mean
            << s.accuracy_mean - b->accuracy_mean << s.macro_f1_mean << b->macro_f1_mean;
  }
  return t;
}

inline std::vector<std::string> model_names(const EvalReport& r) {
  std::vector<std::string> out;
  for (const auto& row : r.rows)
    if (std::find(out.begin(), out.end(), row.model) == out.end()) out.push_back(row.model);
  return out;
}

inline std::string alpha_svg(const EvalReport& r, const std::string& model, TaskCategory cat) {
  std::map<std::size_t, svg::Series> by_k;
  for (const auto& s : r.per_category) {
    const int a = detail::alpha_of(s.setting);
    if (s.model != model || s.category != cat || a < 0) continue;
    auto& series = by_k[s.k];
    series.name = "k=" + std::to_string(s.k);
    series.x.push_back(a);
    series.y.push_back(s.accuracy_mean);
  }
  std::vector<svg::Series> all;
  for (auto& [k, s] : by_k) {
    std::vector<std::size_t> idx(s.x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return s.x[a] < s.x[b]; });
    svg::Series sorted{s.name, {}, {}};
    for (auto i : idx) {
      sorted.x.push_back(s.x[i]);
      sorted.y.push_back(s.y[i]);
    }
    all.push_back(std::move(sorted));
  }
  return svg::line_chart(model + ": " + to_string(cat) + " accuracy by correct-label share", "% correct labels",
                         "accuracy", all);
}

inline std::string gain_svg(const EvalReport& r, TaskCategory cat) {
  std::map<std::string, svg::Series> lines;
  std::vector<std::string> order;
  for (const auto& s : r.per_category) {
    if (s.category != cat || (s.setting != "gold" && s.setting != "flipped")) continue;
    const auto* b = detail::find_summary(r.per_category, s.model, cat,
                                         s.setting == "flipped" ? "no_demo_flipped" : "no_demo", 0);
    if (!b) continue;
    const auto name = s.model + " " + s.setting;
    if (!lines.count(name)) order.push_back(name);
    auto& l = lines[name];
    l.name = name;
    l.x.push_back(static_cast<double>(s.k));
    l.y.push_back(s.accuracy_mean - b->accuracy_mean);
  }
  std::vector<svg::Series> all;
  for (const auto& n : order) all.push_back(lines[n]);
  return svg::line_chart(std::string(to_string(cat)) + ": gain over no-demo", "k", "accuracy gain", all);
}

inline void save_predictions(const std::vector<PredictionRecord>& preds, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  for (const auto& p : preds) {
    const nlohmann::json j = {{"model", p.model},   {"task", p.task},
                              {"setting", p.setting}, {"k", p.k},
                              {"seed", p.seed},     {"query_sample", p.query_sample},
                              {"prediction", p.prediction}, {"correct_option", p.correct_option},
                              {"correct", p.prediction == p.correct_option}};
    out << j.dump() << '\n';
  }
}

/// Writes behavioral/ under `run_dir` and returns the files written.
inline std::vector<fs::path> write_behavioral(const EvalReport& r, const fs::path& run_dir) {
  const auto dir = run_dir / "behavioral";
  std::vector<fs::path> files;
  const auto put_csv = [&](const std::string& name, const CsvTable& t) {
    t.save(dir / name);
    files.push_back(dir / name);
  };
  const auto put_text = [&](const std::string& name, const std::string& text) {
    CsvTable::write_text(dir / name, text);
    files.push_back(dir / name);
  };
  put_csv("rows.csv", rows_csv(r.rows));
  put_csv("summary_by_task.csv", summary_csv(r.per_task, "task"));
  put_csv("summary_by_category.csv", summary_csv(r.per_category, "category"));
  put_csv("gains.csv", gains_csv(r.gains));
  put_csv("gain_summary.csv", gain_summary_csv(r.gains));
  put_csv("alpha_curve.csv", alpha_curve_csv(r));
  put_csv("flipped_curve.csv", flipped_curve_csv(r));
  for (const auto& m : model_names(r)) {
    std::vector<PredictionRecord> mine;
    for (const auto& p : r.predictions)
      if (p.model == m) mine.push_back(p);
    save_predictions(mine, dir / "predictions" / (m + ".jsonl"));
    files.push_back(dir / "predictions" / (m + ".jsonl"));
    for (auto cat : {TaskCategory::retrieval, TaskCategory::contextual})
      put_text("alpha_" + m + "_" + to_string(cat) + ".svg", alpha_svg(r, m, cat));
  }
  for (auto cat : {TaskCategory::retrieval, TaskCategory::contextual})
    put_text("gain_" + std::string(to_string(cat)) + ".svg", gain_svg(r, cat));
  return files;
}

}  // namespace icl
