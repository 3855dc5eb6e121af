#pragma once

#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "icllab/harness/config.hpp"
#include "icllab/io/csv.hpp"
#include "icllab/io/svg.hpp"

namespace icl {

/// Raised when a run directory lacks artifacts the report needs.
class MissingArtifacts : public ConfigError {
 public:
  explicit MissingArtifacts(std::vector<std::string> missing)
      : ConfigError(describe(missing)), missing_(std::move(missing)) {}
  const std::vector<std::string>& missing() const { return missing_; }

 private:
  static std::string describe(const std::vector<std::string>& m) {
    std::string s = "run directory is missing " + std::to_string(m.size()) + " artifact(s):";
    for (const auto& a : m) s += "\n  " + a;
    return s;
  }
  std::vector<std::string> missing_;
};

inline const std::vector<std::string>& behavioral_artifacts() {
  static const std::vector<std::string> names{
      "behavioral/rows.csv",        "behavioral/summary_by_task.csv", "behavioral/summary_by_category.csv",
      "behavioral/gains.csv",       "behavioral/gain_summary.csv",    "behavioral/alpha_curve.csv",
      "behavioral/flipped_curve.csv"};
  return names;
}

inline std::vector<std::string> intervention_artifacts(const std::string& model, bool layerwise) {
  const auto d = "interventions/" + model + "/";
  std::vector<std::string> out;
  for (const char* c : {"retrieval", "contextual"}) {
    out.push_back(d + "aie_" + c + ".csv");
    out.push_back(d + "negative_aie_" + c + ".csv");
  }
  out.push_back(d + "steering.csv");
  out.push_back(d + "ablation.csv");
  out.push_back(d + "overlap.csv");
  if (layerwise) out.push_back(d + "layerwise.csv");
  return out;
}

/// Every artifact a complete run holds; "<model>" stands for each model when
/// the configuration snapshot is itself missing.
inline std::vector<std::string> expected_artifacts(const fs::path& run_dir) {
  std::vector<std::string> out{"config.json"};
  out.insert(out.end(), behavioral_artifacts().begin(), behavioral_artifacts().end());
  if (!fs::exists(run_dir / "config.json")) {
    const auto generic = intervention_artifacts("<model>", true);
    out.insert(out.end(), generic.begin(), generic.end());
    return out;
  }
  const auto cfg = read_json(run_dir / "config.json").get<ExperimentConfig>();
  for (const auto& m : cfg.models) {
    const auto mine = intervention_artifacts(m.name, cfg.interventions.layerwise);
    out.insert(out.end(), mine.begin(), mine.end());
  }
  return out;
}

namespace detail {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ConfigError("column '" + name + "' missing from CSV");
    return static_cast<std::size_t>(it - header.begin());
  }
};

inline Table load_table(const fs::path& p) {
  auto rows = parse_csv(read_text(p));
  if (rows.empty()) throw ConfigError(p.string() + " is empty");
  Table t;
  t.header = std::move(rows.front());
  t.rows.assign(std::make_move_iterator(rows.begin() + 1), std::make_move_iterator(rows.end()));
  return t;
}

inline std::string pct(const std::string& v) {
  if (v.empty()) return "n/a";
  return svg::fixed(100.0 * std::stod(v), 1);
}

inline std::string num(const std::string& v, int digits = 1) {
  if (v.empty()) return "n/a";
  return svg::fixed(std::stod(v), digits);
}

}  // namespace detail

struct ReportResult {
  fs::path summary;
  fs::path index;
  std::vector<std::string> artifacts;  // relative to the run directory, sorted
};

/// Writes summary.md, index.json and derived figures into `run_dir`.
/// Rerunning on unchanged artifacts reproduces identical files.
inline ReportResult write_report(const fs::path& run_dir) {
  std::vector<std::string> missing;
  for (const auto& a : expected_artifacts(run_dir))
    if (!fs::exists(run_dir / a)) missing.push_back(a);
  if (!missing.empty()) throw MissingArtifacts(std::move(missing));

  const auto cfg = read_json(run_dir / "config.json").get<ExperimentConfig>();
  std::ostringstream md;
  md << "# " << cfg.name << "\n\n";
  md << "Models: ";
  for (std::size_t i = 0; i < cfg.models.size(); ++i) md << (i ? ", " : "") << cfg.models[i].name;
  md << ". Seeds: " << cfg.seeds.size() << ". Effect space: " << to_string(cfg.effect_space) << ".\n\n";

  // Behavioral accuracy per category, setting and k.
  const auto cat = detail::load_table(run_dir / "behavioral/summary_by_category.csv");
  md << "## Accuracy by setting (mean over tasks, mean +/- sd over seeds)\n\n";
  md << "| model | category | setting | k | accuracy % | sd | macro-F1 % |\n|---|---|---|---|---|---|---|\n";
  for (const auto& r : cat.rows) {
    md << "| " << r[cat.col("model")] << " | " << r[cat.col("category")] << " | " << r[cat.col("setting")] << " | "
       << r[cat.col("k")] << " | " << detail::pct(r[cat.col("accuracy_mean")]) << " | "
       << detail::pct(r[cat.col("accuracy_sd")]) << " | " << detail::pct(r[cat.col("macro_f1_mean")]) << " |\n";
  }

  const auto gains = detail::load_table(run_dir / "behavioral/gain_summary.csv");
  md << "\n## Gain over the matched no-demo baseline\n\n";
  md << "| model | category | setting | k | accuracy gain (points) | sd |\n|---|---|---|---|---|---|\n";
  for (const auto& r : gains.rows) {
    if (r[gains.col("setting")] != "gold" && r[gains.col("setting")] != "flipped") continue;
    md << "| " << r[gains.col("model")] << " | " << r[gains.col("category")] << " | " << r[gains.col("setting")]
       << " | " << r[gains.col("k")] << " | " << detail::pct(r[gains.col("accuracy_gain_mean")]) << " | "
       << detail::pct(r[gains.col("accuracy_gain_sd")]) << " |\n";
  }

  const auto flipped = detail::load_table(run_dir / "behavioral/flipped_curve.csv");
  std::map<std::string, svg::Series> flip_lines;
  for (const auto& r : flipped.rows) {
    auto& s = flip_lines[r[flipped.col("model")]];
    s.name = r[flipped.col("model")];
    s.x.push_back(std::stod(r[flipped.col("k")]));
    s.y.push_back(std::stod(r[flipped.col("accuracy_gain")]));
  }
  std::vector<svg::Series> flip_series;
  for (auto& [m, s] : flip_lines) flip_series.push_back(s);
  CsvTable::write_text(run_dir / "figures/flipped_gain.svg",
                       svg::line_chart("Flipped-label gain over flipped no-demo (contextual)", "k",
                                       "accuracy gain", flip_series));

  for (const auto& m : cfg.models) {
    const auto dir = run_dir / "interventions" / m.name;
    md << "\n## Interventions: " << m.name << "\n\n";
    const auto steer = detail::load_table(dir / "steering.csv");
    std::map<std::string, std::map<std::string, std::pair<double, int>>> mean_gain;
    std::vector<std::string> p_order;
    for (const auto& r : steer.rows) {
      const auto key = r[steer.col("category")] + " | " + r[steer.col("selection")] + " | " + r[steer.col("stream")];
      const auto& p = r[steer.col("p")];
      if (std::find(p_order.begin(), p_order.end(), p) == p_order.end()) p_order.push_back(p);
      auto& cell = mean_gain[key][p];
      cell.first += std::stod(r[steer.col("accuracy_gain")]);
      cell.second += 1;
    }
    md << "Steering gain over no-demo (accuracy points, mean over seeds)\n\n| category | selection | stream |";
    for (const auto& p : p_order) md << " p=" << p << " |";
    md << "\n|---|---|---|";
    for (std::size_t i = 0; i < p_order.size(); ++i) md << "---|";
    md << "\n";
    for (const auto& [key, byp] : mean_gain) {
      md << "| " << key << " |";
      for (const auto& p : p_order) {
        const auto it = byp.find(p);
        md << ' ' << (it == byp.end() ? "n/a" : svg::fixed(100.0 * it->second.first / it->second.second, 1)) << " |";
      }
      md << "\n";
    }

    const auto abl = detail::load_table(dir / "ablation.csv");
    std::map<std::string, std::map<std::string, std::pair<double, int>>> drops;
    for (const auto& r : abl.rows) {
      const auto key = r[abl.col("category")] + " | " + r[abl.col("selection")] + " | " + r[abl.col("mode")];
      auto& cell = drops[key][r[abl.col("p")]];
      cell.first += std::stod(r[abl.col("accuracy_drop")]);
      cell.second += 1;
    }
    md << "\nAccuracy drop under ablation on gold prompts (points, mean over seeds)\n\n| category | selection | mode |";
    for (const auto& p : p_order) md << " p=" << p << " |";
    md << "\n|---|---|---|";
    for (std::size_t i = 0; i < p_order.size(); ++i) md << "---|";
    md << "\n";
    for (const auto& [key, byp] : drops) {
      md << "| " << key << " |";
      for (const auto& p : p_order) {
        const auto it = byp.find(p);
        md << ' ' << (it == byp.end() ? "n/a" : svg::fixed(100.0 * it->second.first / it->second.second, 1)) << " |";
      }
      md << "\n";
    }

    const auto ov = detail::load_table(dir / "overlap.csv");
    md << "\nOverlap of top heads between categories\n\n| p | stream | heads | overlap % |\n|---|---|---|---|\n";
    svg::Series ov_series{"retrieval vs contextual", {}, {}};
    for (const auto& r : ov.rows) {
      if (r[ov.col("pair")] != "retrieval-contextual") continue;
      md << "| " << r[ov.col("p")] << " | " << r[ov.col("stream")] << " | " << r[ov.col("n_heads")] << " | "
         << detail::num(r[ov.col("overlap_percent")], 2) << " |\n";
      if (r[ov.col("stream")] == "all" && !r[ov.col("overlap_percent")].empty()) {
        ov_series.x.push_back(std::stod(r[ov.col("p")]));
        ov_series.y.push_back(std::stod(r[ov.col("overlap_percent")]));
      }
    }
    CsvTable::write_text(run_dir / "figures" / ("overlap_" + m.name + ".svg"),
                         svg::line_chart(m.name + ": top-head overlap", "p", "overlap %", {ov_series}));
  }

  std::vector<std::string> artifacts;
  for (const auto& e : fs::recursive_directory_iterator(run_dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), run_dir).generic_string();
    if (rel != "summary.md" && rel != "index.json") artifacts.push_back(rel);
  }
  std::sort(artifacts.begin(), artifacts.end());
  md << "\n## Artifacts\n\n";
  for (const auto& a : artifacts) md << "- " << a << "\n";

  nlohmann::json index = {{"experiment", cfg.name}, {"summary", "summary.md"}, {"artifacts", nlohmann::json::array()}};
  for (const auto& a : artifacts) {
    const auto ext = fs::path(a).extension().string();
    index["artifacts"].push_back({{"path", a}, {"type", ext.empty() ? "" : ext.substr(1)}});
  }
  ReportResult res{run_dir / "summary.md", run_dir / "index.json", artifacts};
  CsvTable::write_text(res.summary, md.str());
  CsvTable::write_text(res.index, index.dump(2) + "\n");
  return res;
}

}  // namespace icl
