#include <gtest/gtest.h>

#include "dermcbm/errors.hpp"
#include "dermcbm/experiment.hpp"
#include "support.hpp"

using namespace dermcbm;
using namespace dermcbm::testing;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json read_json(const fs::path& p) { return json::parse(read_text(p)); }

void write_json(const fs::path& p, const json& j) { write_text_file(p, j.dump(2)); }

const json& aggregate_row(const json& report, const std::string& strategy) {
  for (const auto& row : report.at("aggregate")) {
    if (row.at("strategy") == strategy) return row;
  }
  throw std::runtime_error("no aggregate row for " + strategy);
}

}  // namespace

TEST(ExperimentConfig, ParsesAndResolvesRelativePaths) {
  TempDir dir;
  const auto path = write_synthetic_experiment(dir.path(), {}, {});
  const ExperimentConfig c = load_experiment_config(path);
  EXPECT_EQ(c.class_texts, dir / "class_texts.emb");
  EXPECT_EQ(std::get<FixedSplits>(c.splits).test, dir / "test.emb");
  EXPECT_EQ(c.output_dir, dir / "out");
  EXPECT_EQ(c.strategies, (std::vector<Strategy>{Strategy::kBaseline, Strategy::kCbm}));
  EXPECT_EQ(c.train.learning_rate, 1e-2);
  EXPECT_EQ(c.train.lr_factor, 0.8);
  EXPECT_TRUE(c.needs_concepts());
}

TEST(ExperimentConfig, RejectsMalformedFiles) {
  TempDir dir;
  const auto path = write_synthetic_experiment(dir.path(), {}, {});
  const json good = read_json(path);
  auto expect_reject = [&](json j) {
    write_json(dir / "bad.json", j);
    EXPECT_THROW(load_experiment_config(dir / "bad.json"), ConfigError) << j.dump();
  };
  json j = good;
  j["surprise"] = 1;
  expect_reject(j);
  j = good;
  j["kfold"] = {{"images", "train.emb"}};
  expect_reject(j);
  j = good;
  j["strategies"] = {"baseline", "monet"};
  expect_reject(j);
  j = good;
  j["strategies"] = {"cbm", "cbm"};
  expect_reject(j);
  j = good;
  j["train"]["lr_factor"] = 1.5;
  expect_reject(j);
  j = good;
  j["train"]["momentum"] = 0.9;
  expect_reject(j);
  j = good;
  j["seeds"] = json::array();
  expect_reject(j);
  j = good;
  j["projection"] = {{"mode", "checkpoint"}};
  expect_reject(j);
  j = good;
  j.erase("label_space");
  expect_reject(j);
  write_text_file(dir / "broken.json", "{");
  EXPECT_THROW(load_experiment_config(dir / "broken.json"), ConfigError);
}

TEST(ValidateConfig, ConsistentConfigHasNoFindings) {
  TempDir dir;
  SyntheticExperiment exp;
  exp.strategies = {"baseline", "cbm", "gpt_cbm", "linear_probe"};
  const auto findings = validate_config(load_experiment_config(
      write_synthetic_experiment(dir.path(), {}, exp)));
  EXPECT_TRUE(findings.empty()) << findings.front();
}

TEST(ValidateConfig, DimensionMismatchNamesBothFiles) {
  TempDir dir;
  Rng rng(81);
  save_embeddings(EmbeddingSet({"melanoma", "nevus"}, random_matrix(rng, 2, 512)),
                  dir / "texts.emb");
  std::vector<std::string> ids, labels;
  for (int i = 0; i < 10; ++i) {
    ids.push_back("i" + std::to_string(i));
    labels.push_back(i % 2 ? "melanoma" : "nevus");
  }
  save_embeddings(EmbeddingSet(ids, random_matrix(rng, 10, 768), labels), dir / "images.emb");
  write_json(dir / "c.json",
             {{"label_space", {{"classes", {"melanoma", "nevus"}}, {"positive_class", "melanoma"}}},
              {"class_texts", "texts.emb"},
              {"kfold", {{"images", "images.emb"}, {"k", 2}}},
              {"strategies", {"baseline"}},
              {"seeds", {0}},
              {"output_dir", "out"}});
  const auto findings = validate_config(load_experiment_config(dir / "c.json"));
  ASSERT_EQ(findings.size(), 1u);
  EXPECT_NE(findings[0].find("texts.emb"), std::string::npos) << findings[0];
  EXPECT_NE(findings[0].find("images.emb"), std::string::npos) << findings[0];
  EXPECT_NE(findings[0].find("512"), std::string::npos);
  EXPECT_NE(findings[0].find("768"), std::string::npos);
}

TEST(ValidateConfig, DuplicateConceptNameIsOneFinding) {
  TempDir dir;
  SyntheticExperiment exp;
  exp.strategies = {"cbm"};
  const auto path = write_synthetic_experiment(dir.path(), {}, exp);
  json concepts = read_json(dir / "concepts.json");
  concepts["concepts"].push_back(concepts["concepts"][0]);
  write_json(dir / "concepts.json", concepts);
  const auto findings = validate_config(load_experiment_config(path));
  ASSERT_EQ(findings.size(), 1u);
  EXPECT_NE(findings[0].find("repeats"), std::string::npos) << findings[0];
}

TEST(ValidateConfig, CollectsEveryProblem) {
  TempDir dir;
  const auto path = write_synthetic_experiment(dir.path(), {}, {});
  fs::remove(dir / "val.emb");
  fs::remove(dir / "concepts.json");
  json j = read_json(path);
  j["label_space"]["positive_class"] = "bcc";
  write_json(path, j);
  const auto findings = validate_config(load_experiment_config(path));
  EXPECT_EQ(findings.size(), 3u);
  EXPECT_TRUE(fs::exists(dir / "train.emb"));
  EXPECT_FALSE(fs::exists(dir / "out"));
}

TEST(RunExperiment, SeparableDataBothStrategiesAbove95) {
  TempDir dir;
  const auto cfg = load_experiment_config(write_synthetic_experiment(dir.path(), {}, {}));
  const ExperimentResult r = run_experiment(cfg);
  ASSERT_EQ(r.runs.size(), 2u);
  for (const auto& run : r.runs) {
    EXPECT_GE(run.bacc, 0.95) << to_string(run.strategy);
    EXPECT_GE(*run.auc, 0.95) << to_string(run.strategy);
    EXPECT_EQ(run.n_pos, 32u);
    EXPECT_EQ(run.n_neg, 32u);
  }
  const fs::path out = dir / "out";
  EXPECT_EQ(read_json(out / "report.json"), r.report);
  EXPECT_TRUE(fs::exists(out / "roc_baseline.csv"));
  EXPECT_TRUE(fs::exists(out / "roc_cbm.csv"));
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "proj_seed1.emb"));
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "head_cbm_seed1.json"));
  EXPECT_TRUE(fs::exists(out / "run.log"));
  std::size_t explanations = 0;
  for (const auto& e : fs::directory_iterator(out / "explanations")) {
    explanations += e.path().extension() == ".csv";
  }
  EXPECT_EQ(explanations, 64u);
  const std::string csv = read_text(out / "explanations" / "test_0.csv");
  EXPECT_EQ(std::ranges::count(csv, '\n'), 5);
}

TEST(RunExperiment, FourSeedsGiveFourRowsAndOneAggregatePerStrategy) {
  TempDir dir;
  SyntheticExperiment exp;
  exp.seeds = {1, 2, 3, 4};
  exp.max_epochs = 10;
  const ExperimentResult r =
      run_experiment(load_experiment_config(write_synthetic_experiment(dir.path(), {}, exp)));
  for (const std::string s : {"baseline", "cbm"}) {
    std::vector<std::int64_t> seeds;
    for (const auto& row : r.report.at("runs")) {
      if (row.at("strategy") == s) seeds.push_back(row.at("run_seed").get<std::int64_t>());
    }
    EXPECT_EQ(seeds, (std::vector<std::int64_t>{1, 2, 3, 4}));
    const json& agg = aggregate_row(r.report, s);
    EXPECT_EQ(agg.at("n_runs"), 4);
    std::vector<double> baccs;
    for (const auto& row : r.report.at("runs")) {
      if (row.at("strategy") == s) baccs.push_back(row.at("bacc").get<double>());
    }
    EXPECT_EQ(agg.at("bacc_mean").get<double>(), mean_std(baccs).mean);
  }
  EXPECT_EQ(r.report.at("aggregate").size(), 2u);
}

TEST(RunExperiment, MissingConceptFileIsStageNamedConfigError) {
  TempDir dir;
  const auto path = write_synthetic_experiment(dir.path(), {}, {});
  fs::remove(dir / "concepts.json");
  try {
    run_experiment(load_experiment_config(path));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("stage ", 0), 0u) << e.what();
    EXPECT_NE(std::string(e.what()).find("concepts.json"), std::string::npos) << e.what();
  }
}

TEST(RunExperiment, ReportIsByteIdenticalAcrossRuns) {
  TempDir dir;
  SyntheticExperiment exp;
  exp.strategies = {"baseline", "cbm", "gpt_cbm", "linear_probe"};
  exp.seeds = {3, 9};
  exp.max_epochs = 8;
  const auto cfg = load_experiment_config(write_synthetic_experiment(dir.path(), {}, exp));
  run_experiment(cfg);
  const auto first = read_bytes(dir / "out" / "report.json");
  const auto first_roc = read_bytes(dir / "out" / "roc_gpt_cbm.csv");
  fs::remove_all(dir / "out");
  run_experiment(cfg);
  EXPECT_EQ(read_bytes(dir / "out" / "report.json"), first);
  EXPECT_EQ(read_bytes(dir / "out" / "roc_gpt_cbm.csv"), first_roc);
}

TEST(RunExperiment, HeadFileAndIdentityProjection) {
  TempDir dir;
  SyntheticExperiment exp;
  exp.strategies = {"cbm"};
  exp.projection = "identity";
  const auto path = write_synthetic_experiment(dir.path(), {}, exp);
  write_head_file(dir / "head.json", {{1, 1, -1, -1}, 0.0, 123.0});
  json j = read_json(path);
  j["head"] = {{"file", "head.json"}, {"tune_threshold", false}};
  write_json(path, j);
  ExperimentResult r = run_experiment(load_experiment_config(path));
  EXPECT_EQ(r.runs[0].bacc, 0.5);  // threshold far above every score
  EXPECT_FALSE(fs::exists(dir / "out" / "checkpoints" / "proj_seed1.emb"));

  j["head"]["tune_threshold"] = true;
  write_json(path, j);
  r = run_experiment(load_experiment_config(path));
  EXPECT_GE(r.runs[0].bacc, 0.95);
  const MelanomaHead used = read_head_file(dir / "out" / "checkpoints" / "head_cbm_seed1.json");
  EXPECT_EQ(used.coefficients, (std::vector<double>{1, 1, -1, -1}));
  EXPECT_NE(used.threshold, 123.0);

  write_head_file(dir / "head.json", {{1, 1}, 0.0, 0.0});
  EXPECT_THROW(run_experiment(load_experiment_config(path)), ConfigError);
}

TEST(RunExperiment, CheckpointModeReusesTrainedProjections) {
  TempDir dir;
  const auto path = write_synthetic_experiment(dir.path(), {}, {});
  const ExperimentResult trained = run_experiment(load_experiment_config(path));
  json j = read_json(path);
  j["projection"] = {{"mode", "checkpoint"}, {"checkpoint", "out/checkpoints/proj_seed1.emb"}};
  j["output_dir"] = "out2";
  write_json(path, j);
  const ExperimentResult loaded = run_experiment(load_experiment_config(path));
  // Checkpoints are stored at float precision, so only near-equality holds.
  EXPECT_NEAR(*loaded.runs[0].auc, *trained.runs[0].auc, 1e-3);
}

TEST(RunExperiment, KFoldModeReportsFolds) {
  TempDir dir;
  SyntheticExperiment exp;
  exp.strategies = {"baseline", "cbm"};
  exp.max_epochs = 5;
  const auto path = write_synthetic_experiment(dir.path(), {}, exp);
  json j = read_json(path);
  j.erase("splits");
  j["kfold"] = {{"images", "train.emb"}, {"k", 4}};
  j["seeds"] = {5};
  write_json(path, j);
  const ExperimentResult r = run_experiment(load_experiment_config(path));
  EXPECT_EQ(r.report.at("folds").size(), 8u);
  for (const auto& run : r.runs) {
    EXPECT_EQ(run.n_pos + run.n_neg, 64u);
    EXPECT_EQ(run.split_tag, "kfold4");
    EXPECT_GE(run.bacc, 0.9);
  }
  EXPECT_TRUE(fs::exists(dir / "out" / "checkpoints" / "proj_seed5_fold3.emb"));
}

TEST(RunExperiment, LinearProbeOnMulticlassReportsBothBaccs) {
  TempDir dir;
  Rng rng(82);
  const std::vector<std::string> classes{"melanoma", "nevus", "bcc"};
  Matrix texts = random_matrix(rng, 3, 8);
  save_embeddings(EmbeddingSet(classes, texts), dir / "texts.emb");
  auto images = [&](const std::string& prefix, std::size_t n) {
    Matrix m(n, 8);
    std::vector<std::string> ids, labels;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < 8; ++j) m(i, j) = (j == i % 3 ? 1.0 : 0.0) + 0.1 * rng.normal();
      ids.push_back(prefix + std::to_string(i));
      labels.push_back(classes[i % 3]);
    }
    return EmbeddingSet(ids, m, labels);
  };
  save_embeddings(images("tr", 60), dir / "train.emb");
  save_embeddings(images("va", 30), dir / "val.emb");
  save_embeddings(images("te", 30), dir / "test.emb");
  write_json(dir / "c.json",
             {{"label_space", {{"classes", classes}, {"positive_class", "melanoma"}}},
              {"class_texts", "texts.emb"},
              {"splits", {{"train", "train.emb"}, {"val", "val.emb"}, {"test", "test.emb"}}},
              {"strategies", {"linear_probe", "baseline"}},
              {"projection", {{"mode", "identity"}}},
              {"seeds", {0}},
              {"output_dir", "out"}});
  const ExperimentResult r = run_experiment(load_experiment_config(dir / "c.json"));
  ASSERT_EQ(r.runs.size(), 2u);
  EXPECT_EQ(r.runs[0].strategy, Strategy::kLinearProbe);
  EXPECT_EQ(r.runs[0].bacc, 1.0);
  EXPECT_EQ(*r.runs[0].bacc_multiclass, 1.0);
  EXPECT_TRUE(r.runs[1].bacc_multiclass.has_value());
  EXPECT_TRUE(aggregate_row(r.report, "baseline").contains("bacc_multiclass_mean"));
}

TEST(SizeSweep, FullSizeEqualsRunExperiment) {
  TempDir dir;
  SyntheticExperiment exp;
  exp.strategies = {"cbm"};
  exp.seeds = {2};
  const auto cfg = load_experiment_config(write_synthetic_experiment(dir.path(), {}, exp));
  const ExperimentResult full = run_experiment(cfg);
  const auto rows = run_size_sweep(cfg, {64});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].aucs.at(0), *full.runs[0].auc);
  EXPECT_EQ(read_text(dir / "out" / "sweep.csv"), sweep_csv(rows));
}

TEST(SizeSweep, AucTrendsUpWithAtMostOneInversion) {
  TempDir dir;
  SyntheticSpec spec;
  spec.sigma = 0.35;
  SyntheticExperiment exp;
  exp.strategies = {"cbm"};
  exp.seeds = {1, 2, 3, 4};
  const auto cfg = load_experiment_config(write_synthetic_experiment(dir.path(), spec, exp));
  const auto rows = run_size_sweep(cfg, {8, 16, 32, 64});
  int inversions = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) inversions += rows[i].auc_mean < rows[i - 1].auc_mean;
  EXPECT_LE(inversions, 1) << sweep_csv(rows);
  EXPECT_GT(rows.back().auc_mean, rows.front().auc_mean) << sweep_csv(rows);
}

TEST(SizeSweep, Errors) {
  TempDir dir;
  const auto cfg = load_experiment_config(write_synthetic_experiment(dir.path(), {}, {}));
  EXPECT_THROW(run_size_sweep(cfg, {65}), ConfigError);
  EXPECT_THROW(run_size_sweep(cfg, {32, 16}), ConfigError);
  EXPECT_THROW(run_size_sweep(cfg, {}), ConfigError);
}

TEST(SanitizeId, ReplacesPathCharacters) {
  EXPECT_EQ(sanitize_id("ISIC_0024306"), "ISIC_0024306");
  EXPECT_EQ(sanitize_id("a/b c:d"), "a_b_c_d");
  EXPECT_EQ(sanitize_id(".."), "_..");
}
