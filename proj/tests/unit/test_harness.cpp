#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>

#include "icllab/harness/experiment.hpp"
#include "support/micro.hpp"

namespace icl {
namespace {

using testing::micro_config;

TaskSuite micro_suite() {
  SuiteSpec s;
  s.n_retrieval = 2;
  s.n_contextual = 2;
  s.relations_per_domain = 2;
  s.pairs_per_task = 60;
  s.contextual_samples = 90;
  s.aie_reserve = 6;
  s.n_filler = 8;
  s.features_per_class = 2;
  return generate_task_suite(5, s);
}

ExperimentConfig micro_experiment(const std::string& name) {
  ExperimentConfig c;
  c.name = name;
  c.suite = "suite.json";
  c.models = {{"hybrid", "hybrid.ckpt"}, {"ssm", "ssm.ckpt"}};
  c.settings = {"alpha_50", "gold", "flipped"};
  c.ks = {0, 4, 8};
  c.seeds = {0, 1};
  c.prompts_per_task = 4;
  c.require_fitness = false;
  c.interventions.p_grid = {0.1, 0.2};
  c.interventions.aie_k = 4;
  c.interventions.aie_prompts = 2;
  c.interventions.fv_prompts = 3;
  c.interventions.ablation_k = 4;
  c.interventions.eval_limit = 3;
  return c;
}

// A temporary run root holding the suite and two micro checkpoints.
class HarnessFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(fs::temp_directory_path() / "icllab_harness_test");
    fs::remove_all(*root_);
    fs::create_directories(*root_);
    const auto suite = micro_suite();
    save_suite(suite, *root_ / "suite.json");
    for (auto [name, arch] : {std::pair{"hybrid", Arch::hybrid_parallel}, std::pair{"ssm", Arch::ssm_multi_head}}) {
      auto c = micro_config(arch, suite.vocab.size());
      c.max_seq_len = 128;
      checkpoint_save(Model<float>(c, 7), *root_ / (std::string(name) + ".ckpt"));
    }
    setenv(kRunRootVariable, (*root_ / "runs").c_str(), 1);
  }
  static void TearDownTestSuite() {
    unsetenv(kRunRootVariable);
    fs::remove_all(*root_);
    delete root_;
  }

  static ExperimentConfig config(const std::string& name) {
    auto c = micro_experiment(name);
    c.base_dir = *root_;
    return c;
  }

  static std::map<std::string, std::string> csv_bytes(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.path().extension() == ".csv") out[fs::relative(e.path(), dir).generic_string()] = read_text(e.path());
    return out;
  }

  static fs::path* root_;
};

fs::path* HarnessFixture::root_ = nullptr;

TEST(ExperimentConfigJson, RoundTripsAndFillsDefaults) {
  auto c = micro_experiment("rt");
  const nlohmann::json j = c;
  EXPECT_EQ(j.at("format"), kExperimentFormat);
  EXPECT_EQ(j.get<ExperimentConfig>(), c);

  const auto minimal = nlohmann::json::parse(R"({"suite": "s.json", "models": [{"name": "m", "checkpoint": "m.ckpt"}]})")
                           .get<ExperimentConfig>();
  EXPECT_EQ(minimal.ks, (std::vector<std::size_t>{4, 8, 12, 16, 32}));
  EXPECT_EQ(minimal.seeds.size(), 5u);
  EXPECT_EQ(minimal.interventions.p_grid.size(), 10u);
  EXPECT_DOUBLE_EQ(minimal.interventions.p_grid.front(), 0.02);
  EXPECT_DOUBLE_EQ(minimal.interventions.p_grid.back(), 0.20);
  EXPECT_EQ(minimal.interventions.aie_k, 10u);
  EXPECT_EQ(minimal.interventions.aie_prompts, 25u);
  EXPECT_EQ(minimal.interventions.fv_prompts, 100u);
  EXPECT_NO_THROW(minimal.validate());

  auto bad = j;
  bad["format"] = "icllab-experiment/99";
  EXPECT_THROW(bad.get<ExperimentConfig>(), ConfigError);
}

TEST(ExperimentConfigJson, ValidationRejectsBadGrids) {
  const auto expect_bad = [](auto edit) {
    auto c = micro_experiment("v");
    edit(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  expect_bad([](ExperimentConfig& c) { c.ks = {}; });
  expect_bad([](ExperimentConfig& c) { c.ks = {5}; });
  expect_bad([](ExperimentConfig& c) { c.seeds = {}; });
  expect_bad([](ExperimentConfig& c) { c.interventions.p_grid = {0.25}; });
  expect_bad([](ExperimentConfig& c) { c.interventions.p_grid = {0.0}; });
  expect_bad([](ExperimentConfig& c) { c.interventions.p_grid = {}; });
  expect_bad([](ExperimentConfig& c) { c.settings = {"gold", "gold"}; });
  expect_bad([](ExperimentConfig& c) { c.settings = {"alpha_140"}; });
  expect_bad([](ExperimentConfig& c) { c.models = {}; });
  expect_bad([](ExperimentConfig& c) { c.models.push_back(c.models.front()); });
  expect_bad([](ExperimentConfig& c) { c.name = "a/b"; });
}

TEST(RunRoot, FollowsTheEnvironment) {
  const char* old = std::getenv(kRunRootVariable);
  const std::string saved = old ? old : "";
  setenv(kRunRootVariable, "/tmp/elsewhere", 1);
  EXPECT_EQ(run_directory(micro_experiment("e1")), fs::path("/tmp/elsewhere/e1"));
  unsetenv(kRunRootVariable);
  EXPECT_EQ(run_root(), fs::path("runs"));
  if (old) setenv(kRunRootVariable, saved.c_str(), 1);
}

TEST(Settings, FlippedRunsOnlyOnContextualTasks) {
  const auto suite = micro_suite();
  const auto demo = micro_experiment("s").demo_settings();
  for (const auto& t : suite.tasks) {
    std::set<std::string> names;
    for (const auto& s : settings_for(t, demo)) names.insert(s.name());
    const bool ctx = t.category == TaskCategory::contextual;
    EXPECT_EQ(names.count("flipped"), ctx ? 1u : 0u) << t.id;
    EXPECT_EQ(names.count("no_demo_flipped"), ctx ? 1u : 0u) << t.id;
    EXPECT_EQ(names.count("no_demo"), 1u);
    EXPECT_EQ(names.count("gold"), 1u);
  }
}

TEST(Gains, FlippedRowsUseTheFlippedBaseline) {
  std::vector<EvalRow> rows{{"m", "t", TaskCategory::contextual, "no_demo", 0, 3, 10, 0.5, 0.4},
                            {"m", "t", TaskCategory::contextual, "no_demo_flipped", 0, 3, 10, 0.1, 0.05},
                            {"m", "t", TaskCategory::contextual, "gold", 4, 3, 10, 0.9, 0.85},
                            {"m", "t", TaskCategory::contextual, "flipped", 4, 3, 10, 0.7, 0.6}};
  const auto g = compute_gains(rows);
  ASSERT_EQ(g.size(), 2u);
  EXPECT_EQ(g[0].baseline, "no_demo");
  EXPECT_EQ(g[0].accuracy_gain, 0.9 - 0.5);
  EXPECT_EQ(g[0].macro_f1_gain, 0.85 - 0.4);
  EXPECT_EQ(g[1].baseline, "no_demo_flipped");
  EXPECT_EQ(g[1].accuracy_gain, 0.7 - 0.1);
  EXPECT_EQ(g[1].macro_f1_gain, 0.6 - 0.05);
  rows.erase(rows.begin() + 1);
  EXPECT_THROW(compute_gains(rows), ContractError);
}

TEST(MeanSd, SampleStandardDeviation) {
  const auto r = mean_sd({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(r.mean, 2.5);
  EXPECT_NEAR(r.sd, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_EQ(mean_sd({0.7}).sd, 0.0);
  EXPECT_THROW(mean_sd({}), ContractError);
}

TEST_F(HarnessFixture, WorkspaceRejectsMissingCheckpointsAndVocabMismatch) {
  auto c = config("ws");
  c.models[1].checkpoint = "absent.ckpt";
  EXPECT_THROW(Workspace{c}, ConfigError);

  auto small = micro_config(Arch::transformer, 10);
  checkpoint_save(Model<float>(small, 1), *root_ / "small.ckpt");
  c.models[1].checkpoint = "small.ckpt";
  EXPECT_THROW(Workspace{c}, ConfigError);
}

TEST_F(HarnessFixture, FitnessIsEnforcedWhenRequired) {
  auto c = config("fit");
  c.models.resize(1);
  c.require_fitness = true;
  const Workspace ws(c);
  EXPECT_THROW(ws.check_fitness(), FitnessError);
  const auto text = read_text(ws.run_dir() / "fitness" / "hybrid.txt");
  EXPECT_NE(text.find("FAIL"), std::string::npos);
}

TEST_F(HarnessFixture, BehavioralGridShapeGainsAndSummaries) {
  const auto c = config("grid");
  const Workspace ws(c);
  const auto report = behave(ws);
  const auto& suite = ws.suite();

  // Retrieval: no_demo + 2 demo settings x 2 nonzero k. Contextual adds
  // no_demo_flipped and flipped x 2 nonzero k.
  const std::size_t n_ret = suite.of(TaskCategory::retrieval).size(), n_ctx = suite.of(TaskCategory::contextual).size();
  const std::size_t nonzero_k = 2, seeds = 2, models = 2;
  const std::size_t expected = models * seeds * (n_ret * (1 + 2 * nonzero_k) + n_ctx * (2 + 3 * nonzero_k));
  EXPECT_EQ(report.rows.size(), expected);

  std::map<std::tuple<std::string, std::string, std::string, std::size_t, std::uint64_t>, const EvalRow*> index;
  for (const auto& r : report.rows) {
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
    EXPECT_GE(r.macro_f1, 0.0);
    EXPECT_LE(r.macro_f1, 1.0);
    EXPECT_EQ(r.n_prompts, 4u);
    EXPECT_EQ(r.k == 0, r.setting == "no_demo" || r.setting == "no_demo_flipped") << r.setting;
    if (r.category == TaskCategory::retrieval) EXPECT_EQ(r.setting.find("flipped"), std::string::npos);
    EXPECT_TRUE(index.emplace(std::make_tuple(r.model, r.task, r.setting, r.k, r.seed), &r).second);
  }
  std::size_t zero_rows = 0;
  for (const auto& r : report.rows) zero_rows += r.setting == "no_demo";
  EXPECT_EQ(zero_rows, models * seeds * (n_ret + n_ctx));

  ASSERT_EQ(report.gains.size(), expected - models * seeds * (n_ret + 2 * n_ctx));
  for (const auto& g : report.gains) {
    const auto& cond = *index.at({g.model, g.task, g.setting, g.k, g.seed});
    const auto& base = *index.at({g.model, g.task, g.setting == "flipped" ? "no_demo_flipped" : "no_demo", 0, g.seed});
    EXPECT_EQ(g.accuracy_gain, cond.accuracy - base.accuracy);
    EXPECT_EQ(g.macro_f1_gain, cond.macro_f1 - base.macro_f1);
  }

  for (const auto& s : report.per_category) {
    EXPECT_EQ(s.n_seeds, seeds);
    std::vector<double> per_seed;
    for (auto seed : c.seeds) {
      double sum = 0;
      int n = 0;
      for (const auto& r : report.rows) {
        if (r.model == s.model && r.category == s.category && r.setting == s.setting && r.k == s.k && r.seed == seed) {
          sum += r.accuracy;
          ++n;
        }
      }
      per_seed.push_back(sum / n);
    }
    const double mean = (per_seed[0] + per_seed[1]) / 2;
    EXPECT_NEAR(s.accuracy_mean, mean, 1e-12);
    EXPECT_NEAR(s.accuracy_sd, std::abs(per_seed[0] - per_seed[1]) / std::sqrt(2.0), 1e-12);
  }

  for (const auto& f : behavioral_artifacts()) EXPECT_TRUE(fs::exists(ws.run_dir() / f)) << f;
  EXPECT_TRUE(fs::exists(ws.run_dir() / "behavioral/predictions/hybrid.jsonl"));
  const auto snap = read_json(ws.run_dir() / "config.json");
  EXPECT_TRUE(fs::path(snap.at("suite").get<std::string>()).is_absolute());
}

TEST_F(HarnessFixture, ZeroOnlyKListCollapsesToNoDemoRows) {
  auto c = config("k0");
  c.ks = {0};
  c.settings = {"gold"};
  c.models.resize(1);
  const Workspace ws(c);
  const auto report = run_behavioral(c, ws.suite(), ws.named());
  EXPECT_EQ(report.rows.size(), ws.suite().tasks.size() * c.seeds.size());
  for (const auto& r : report.rows) EXPECT_EQ(r.setting, "no_demo");
  EXPECT_TRUE(report.gains.empty());
}

TEST_F(HarnessFixture, InterventionInvariants) {
  auto c = config("mech");
  c.models.resize(1);
  const Workspace ws(c);
  MechanisticRun run(ws.config(), ws.suite(), ws.name(0), ws.model(0));
  const auto& mc = ws.model(0).config();

  const auto grid = head_grid(mc, run.aie(TaskCategory::retrieval).values);
  const auto rows = parse_csv(head_grid_csv(grid).str());
  ASSERT_EQ(rows.size(), 1 + mc.n_layers);
  EXPECT_EQ(rows.front().size(), 1 + mc.layer_heads(0).size());

  // 8 heads: p = 0.1 selects none, so steering must reproduce the baseline.
  for (const auto& r : run.steering()) {
    if (r.n_heads == 0) {
      EXPECT_EQ(r.score.accuracy, r.baseline.accuracy);
      EXPECT_EQ(r.score.macro_f1, r.baseline.macro_f1);
    }
  }
  bool saw_empty = false;
  for (const auto& r : run.steering()) saw_empty = saw_empty || r.n_heads == 0;
  EXPECT_TRUE(saw_empty);

  for (const auto& r : run.overlaps()) {
    if (r.pair == "retrieval-contextual") continue;
    if (r.n_heads == 0) {
      EXPECT_FALSE(r.percent.has_value());
    } else {
      ASSERT_TRUE(r.percent.has_value());
      EXPECT_EQ(*r.percent, 100.0);
    }
  }
  for (const auto& r : run.ablation()) {
    if (r.n_heads == 0) EXPECT_EQ(r.score.accuracy, r.unablated.accuracy);
  }
}

TEST_F(HarnessFixture, ReportListsEveryMissingArtifact) {
  const auto empty = *root_ / "runs" / "empty";
  fs::create_directories(empty);
  try {
    write_report(empty);
    FAIL() << "expected MissingArtifacts";
  } catch (const MissingArtifacts& e) {
    EXPECT_EQ(e.missing(), expected_artifacts(empty));
    EXPECT_GT(e.missing().size(), behavioral_artifacts().size());
    EXPECT_NE(std::string(e.what()).find("behavioral/rows.csv"), std::string::npos);
  }
}

TEST_F(HarnessFixture, FullRunIsDeterministicAndReportIdempotent) {
  auto first = config("replay_a");
  const auto a = run_experiment(Workspace(first));
  auto second = config("replay_b");
  run_experiment(Workspace(second));

  const auto dir_a = run_directory(first), dir_b = run_directory(second);
  const auto bytes_a = csv_bytes(dir_a), bytes_b = csv_bytes(dir_b);
  EXPECT_GT(bytes_a.size(), 15u);
  EXPECT_EQ(bytes_a, bytes_b);

  const auto summary = read_text(a.summary), index = read_text(a.index);
  const auto again = write_report(dir_a);
  EXPECT_EQ(read_text(again.summary), summary);
  EXPECT_EQ(read_text(again.index), index);
  EXPECT_EQ(again.artifacts, a.artifacts);
  for (const auto& f : expected_artifacts(dir_a)) EXPECT_TRUE(fs::exists(dir_a / f)) << f;
}

}  // namespace
}  // namespace icl
