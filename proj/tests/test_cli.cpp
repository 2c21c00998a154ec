#include <cstdlib>
#include <string>
#include <sys/wait.h>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace dermcbm;
using namespace dermcbm::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome run_cli(const TempDir& dir, const std::string& args) {
  const fs::path capture = dir / "stdout.txt";
  const std::string cmd = std::string("\"") + DERMCBM_CLI_PATH + "\" " + args + " > \"" +
                          capture.string() + "\" 2> \"" + (dir / "stderr.txt").string() + "\"";
  const int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  o.out = read_text(capture);
  return o;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

SyntheticExperiment quick() {
  SyntheticExperiment exp;
  exp.max_epochs = 10;
  return exp;
}

}  // namespace

TEST(Cli, ValidateGoodAndBadConfigs) {
  TempDir dir;
  const auto cfg = write_synthetic_experiment(dir.path(), {}, quick());
  Outcome o = run_cli(dir, "validate --config " + q(cfg));
  EXPECT_EQ(o.code, 0);
  EXPECT_NE(o.out.find("config ok"), std::string::npos);

  fs::remove(dir / "val.emb");
  o = run_cli(dir, "validate --config " + q(cfg));
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.out.find("val.emb"), std::string::npos) << o.out;
}

TEST(Cli, UsageErrorsExitTwo) {
  TempDir dir;
  EXPECT_EQ(run_cli(dir, "").code, 2);
  EXPECT_EQ(run_cli(dir, "eval").code, 2);
  EXPECT_EQ(run_cli(dir, "frobnicate").code, 2);
  EXPECT_EQ(run_cli(dir, "validate --config " + q(dir / "missing.json")).code, 2);
  EXPECT_EQ(run_cli(dir, "--help").code, 0);
}

TEST(Cli, EvalWritesReportAndHonorsSeedOverride) {
  TempDir dir;
  const auto cfg = write_synthetic_experiment(dir.path(), {}, quick());
  const Outcome o = run_cli(dir, "eval --config " + q(cfg) + " --seed 5 --out " + q(dir / "o"));
  ASSERT_EQ(o.code, 0) << read_text(dir / "stderr.txt");
  const auto report = nlohmann::json::parse(read_text(dir / "o" / "report.json"));
  ASSERT_EQ(report.at("runs").size(), 2u);
  EXPECT_EQ(report.at("runs")[0].at("run_seed"), 5);
  EXPECT_TRUE(fs::exists(dir / "o" / "roc_cbm.csv"));
}

TEST(Cli, EvalStrategySubsetAndProbe) {
  TempDir dir;
  const auto cfg = write_synthetic_experiment(dir.path(), {}, quick());
  Outcome o = run_cli(dir, "eval --config " + q(cfg) + " --strategies baseline");
  ASSERT_EQ(o.code, 0) << read_text(dir / "stderr.txt");
  auto report = nlohmann::json::parse(read_text(dir / "out" / "report.json"));
  EXPECT_EQ(report.at("runs").size(), 1u);
  o = run_cli(dir, "probe --config " + q(cfg));
  ASSERT_EQ(o.code, 0) << read_text(dir / "stderr.txt");
  report = nlohmann::json::parse(read_text(dir / "out" / "report.json"));
  EXPECT_EQ(report.at("runs")[0].at("strategy"), "linear_probe");
  EXPECT_EQ(run_cli(dir, "eval --config " + q(cfg) + " --strategies monet").code, 2);
}

TEST(Cli, TrainFitAndExplain) {
  TempDir dir;
  const auto cfg = write_synthetic_experiment(dir.path(), {}, quick());
  ASSERT_EQ(run_cli(dir, "train-proj --config " + q(cfg)).code, 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "checkpoints" / "proj_seed1.emb"));
  ASSERT_EQ(run_cli(dir, "fit-head --config " + q(cfg) + " --strategy cbm").code, 0);
  const fs::path head = dir / "out" / "checkpoints" / "head_cbm_seed1.json";
  ASSERT_TRUE(fs::exists(head));
  EXPECT_EQ(read_head_file(head).coefficients.size(), 4u);

  Outcome o = run_cli(dir, "explain --config " + q(cfg) + " --id test_3 --format json --head " +
                               q(head));
  ASSERT_EQ(o.code, 0) << read_text(dir / "stderr.txt");
  const auto e = nlohmann::json::parse(o.out);
  EXPECT_EQ(e.at("image_id"), "test_3");
  EXPECT_EQ(e.at("contributions").size(), 4u);

  o = run_cli(dir, "explain --config " + q(cfg) + " --id nowhere");
  EXPECT_EQ(o.code, 2);
}

TEST(Cli, TuneThreshold) {
  TempDir dir;
  write_text_file(dir / "scores.csv", "score,label\n0.1,0\n0.2,0\n0.8,1\n0.9,1\n");
  Outcome o = run_cli(dir, "tune-threshold --scores " + q(dir / "scores.csv") + " --out " +
                               q(dir / "t"));
  ASSERT_EQ(o.code, 0) << read_text(dir / "stderr.txt");
  const auto j = nlohmann::json::parse(o.out);
  EXPECT_DOUBLE_EQ(j.at("threshold").get<double>(), 0.5);
  EXPECT_EQ(j.at("bacc"), 1.0);
  EXPECT_EQ(nlohmann::json::parse(read_text(dir / "t" / "threshold.json")), j);

  write_text_file(dir / "one.csv", "score,label\n0.1,1\n0.2,1\n");
  EXPECT_EQ(run_cli(dir, "tune-threshold --scores " + q(dir / "one.csv")).code, 2);
  write_text_file(dir / "nan.csv", "score,label\nnan,0\n0.2,1\n");
  EXPECT_EQ(run_cli(dir, "tune-threshold --scores " + q(dir / "nan.csv")).code, 3);
}

TEST(Cli, SweepPrintsCsv) {
  TempDir dir;
  const auto cfg = write_synthetic_experiment(dir.path(), {}, quick());
  const Outcome o = run_cli(dir, "sweep-size --config " + q(cfg) + " --sizes 16,64");
  ASSERT_EQ(o.code, 0) << read_text(dir / "stderr.txt");
  EXPECT_EQ(o.out.substr(0, o.out.find('\n')), "size,auc_mean,auc_std");
  EXPECT_EQ(std::ranges::count(o.out, '\n'), 3);
  EXPECT_EQ(read_text(dir / "out" / "sweep.csv"), o.out);
}
