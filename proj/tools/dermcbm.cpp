// dermcbm: command-line driver for projection training, bottleneck heads and
// evaluation runs. Exit codes: 0 success, 2 configuration error, 3 numerical
// failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dermcbm/config_json.hpp"
#include "dermcbm/errors.hpp"
#include "dermcbm/experiment.hpp"

namespace fs = std::filesystem;
using namespace dermcbm;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = true) {
  auto* opt = cmd->add_option("--config", c.config, "experiment config (JSON)");
  if (config_required) opt->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "run only this seed instead of the configured list");
  cmd->add_option("--out", c.out, "output directory (overrides output_dir)");
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig config = load_experiment_config(c.config);
  if (c.seed) config.seeds = {*c.seed};
  if (c.out) config.output_dir = *c.out;
  return config;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text)) throw IoError("cannot write " + path.string());
}

void print_aggregate(const nlohmann::json& report) {
  std::printf("%-14s %6s %10s %10s %10s %10s\n", "strategy", "runs", "bacc", "bacc_sd", "auc",
              "auc_sd");
  for (const auto& row : report.at("aggregate")) {
    std::printf("%-14s %6zu %10.4f %10.4f %10.4f %10.4f\n",
                row.at("strategy").get<std::string>().c_str(), row.at("n_runs").get<std::size_t>(),
                row.at("bacc_mean").get<double>(), row.at("bacc_std").get<double>(),
                row.at("auc_mean").get<double>(), row.at("auc_std").get<double>());
  }
}

int cmd_validate(const Common& c) {
  const auto findings = validate_config(load(c));
  for (const auto& f : findings) std::printf("%s\n", f.c_str());
  if (!findings.empty()) {
    std::fprintf(stderr, "%zu finding(s)\n", findings.size());
    return kExitConfig;
  }
  std::printf("config ok\n");
  return 0;
}

int cmd_eval(const Common& c, const std::vector<std::string>& strategies) {
  ExperimentConfig config = load(c);
  if (!strategies.empty()) {
    config.strategies.clear();
    for (const auto& s : strategies) config.strategies.push_back(strategy_from_string(s));
  }
  const ExperimentResult result = run_experiment(config);
  print_aggregate(result.report);
  std::printf("report written to %s\n", (config.output_dir / "report.json").string().c_str());
  return 0;
}

int cmd_train_proj(const Common& c) {
  ExperimentConfig config = load(c);
  config.projection = ProjectionMode::kTrain;
  const ExperimentData data = load_experiment_data(config);
  const fs::path dir = config.output_dir / "checkpoints";
  fs::create_directories(dir);
  for (std::uint64_t seed : config.seeds) {
    const bool kfold = std::holds_alternative<KFoldSplits>(config.splits);
    for (const SplitSet& split : splits_for_seed(config, data, seed)) {
      std::optional<TrainLog> log;
      const ProjectionPair proj = obtain_projections(config, data, split, seed, &log);
      const std::string suffix =
          "seed" + std::to_string(seed) + (kfold ? "_" + split.tag : std::string());
      const fs::path path = dir / ("proj_" + suffix + ".emb");
      save_checkpoint(path, proj, config.train, log->best_val_loss);
      std::printf("%s: epoch0 val %.6f, best epoch %d val %.6f -> %s\n", suffix.c_str(),
                  log->epochs.front().val_loss, log->best_epoch, log->best_val_loss,
                  path.string().c_str());
    }
  }
  return 0;
}

Strategy bottleneck_strategy(const std::string& name) {
  const Strategy s = strategy_from_string(name);
  if (s != Strategy::kCbm && s != Strategy::kGptCbm) {
    throw ConfigError("--strategy must be cbm or gpt_cbm");
  }
  return s;
}

int cmd_fit_head(const Common& c, const std::string& strategy_name) {
  ExperimentConfig config = load(c);
  const Strategy strategy = bottleneck_strategy(strategy_name);
  config.strategies = {strategy};
  config.head_file.reset();
  const ExperimentData data = load_experiment_data(config);
  if (!data.train) throw ConfigError("fit-head needs fixed train/val/test splits");
  for (std::uint64_t seed : config.seeds) {
    const SplitSet split = splits_for_seed(config, data, seed).front();
    const ProjectionPair proj = obtain_projections(config, data, split, seed, nullptr);
    const Matrix train_p =
        concept_scores_for(strategy, split.train.matrix(), *data.concepts, proj);
    const Matrix val_p = concept_scores_for(strategy, split.val.matrix(), *data.concepts, proj);
    const MelanomaHead head = obtain_head(config, data, train_p, melanoma_truth(split.train, data.space),
                                          val_p, melanoma_truth(split.val, data.space));
    const fs::path path = config.output_dir / "checkpoints" /
                          ("head_" + to_string(strategy) + "_seed" + std::to_string(seed) + ".json");
    write_head_file(path, head);
    std::printf("seed %llu: intercept %.6f threshold %.6f -> %s\n",
                static_cast<unsigned long long>(seed), head.intercept, head.threshold,
                path.string().c_str());
  }
  return 0;
}

// Reads "score,label" rows; a header line is skipped when its first field is
// not numeric.
std::pair<std::vector<double>, std::vector<int>> read_scores_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::vector<double> scores;
  std::vector<int> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected score,label");
    }
    const std::string a = line.substr(0, comma);
    const std::string b = line.substr(comma + 1);
    char* end = nullptr;
    const double score = std::strtod(a.c_str(), &end);
    if (end == a.c_str() || *end != '\0') {
      if (line_no == 1) continue;
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad score \"" + a + "\"");
    }
    if (b != "0" && b != "1") {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": label must be 0 or 1, got \"" + b + "\"");
    }
    scores.push_back(score);
    labels.push_back(b == "1" ? 1 : 0);
  }
  return {scores, labels};
}

int cmd_tune_threshold(const std::string& scores_path, const std::optional<std::string>& out) {
  const auto [scores, labels] = read_scores_csv(scores_path);
  const ThresholdChoice choice = tune_threshold(scores, labels);
  const nlohmann::json j{{"threshold", choice.threshold}, {"bacc", choice.bacc}};
  std::printf("%s\n", j.dump(2).c_str());
  if (out) write_file(fs::path(*out) / "threshold.json", j.dump(2) + "\n");
  return 0;
}

int cmd_sweep(const Common& c, const std::vector<std::size_t>& sizes) {
  const ExperimentConfig config = load(c);
  const auto rows = run_size_sweep(config, sizes);
  std::printf("%s", sweep_csv(rows).c_str());
  return 0;
}

int cmd_explain(const Common& c, const std::string& id, const std::string& format,
                const std::optional<std::string>& head_path, const std::string& strategy_name) {
  ExperimentConfig config = load(c);
  const Strategy strategy = bottleneck_strategy(strategy_name);
  const RenderFormat fmt = render_format_from_string(format);
  config.strategies = {strategy};
  if (head_path) config.head_file = *head_path;
  if (!config.head_file) throw ConfigError("explain needs --head or a head file in the config");
  config.tune_head_threshold = false;
  const ExperimentData data = load_experiment_data(config);
  const std::uint64_t seed = config.seeds.front();
  for (const SplitSet& split : splits_for_seed(config, data, seed)) {
    for (const EmbeddingSet* set : {&split.test, &split.val, &split.train}) {
      const auto row = set->find(id);
      if (!row) continue;
      const ProjectionPair proj = obtain_projections(config, data, split, seed, nullptr);
      Matrix image(1, set->dim());
      std::ranges::copy(set->matrix().row(*row), image.row(0).begin());
      const Matrix p = concept_scores_for(strategy, image, *data.concepts, proj);
      const Explanation e = explain_prediction(p.row(0), *data.head_file, *data.concepts, id);
      const std::string text = render_explanation(e, fmt);
      std::printf("%s", text.c_str());
      if (c.out) {
        const char* ext = fmt == RenderFormat::kJson ? ".json" : fmt == RenderFormat::kCsv ? ".csv" : ".txt";
        write_file(fs::path(*c.out) / "explanations" / (sanitize_id(id) + ext), text);
      }
      return 0;
    }
  }
  throw ConfigError("image id \"" + id + "\" not found in any split");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept bottleneck evaluation on precomputed image/text embeddings"};
  app.require_subcommand(1);

  Common common;
  std::vector<std::string> eval_strategies;
  std::string head_strategy = "cbm";
  std::string scores_path;
  std::optional<std::string> tune_out;
  std::vector<std::size_t> sizes;
  std::string explain_id;
  std::string explain_format = "text";
  std::optional<std::string> explain_head;
  std::string explain_strategy = "cbm";

  auto* validate = app.add_subcommand("validate", "report every inconsistency in a config");
  add_common(validate, common);

  auto* eval = app.add_subcommand("eval", "run all seeds and strategies, write report.json");
  add_common(eval, common);
  eval->add_option("--strategies", eval_strategies,
                   "override strategy list (baseline, cbm, gpt_cbm, linear_probe)")
      ->delimiter(',');

  auto* probe = app.add_subcommand("probe", "linear probe on raw image embeddings");
  add_common(probe, common);

  auto* train = app.add_subcommand("train-proj", "train projections and save checkpoints");
  add_common(train, common);

  auto* fit = app.add_subcommand("fit-head", "fit the melanoma head on concept scores");
  add_common(fit, common);
  fit->add_option("--strategy", head_strategy, "cbm or gpt_cbm");

  auto* tune = app.add_subcommand("tune-threshold", "best-BACC threshold for score,label rows");
  tune->add_option("--scores", scores_path, "CSV with score,label rows")
      ->required()
      ->check(CLI::ExistingFile);
  tune->add_option("--out", tune_out, "directory for threshold.json");

  auto* sweep = app.add_subcommand("sweep-size", "CBM AUC against training-set size");
  add_common(sweep, common);
  sweep->add_option("--sizes", sizes, "ascending training sizes, e.g. 8,16,32")
      ->required()
      ->delimiter(',');

  auto* explain = app.add_subcommand("explain", "per-concept decomposition for one image");
  add_common(explain, common);
  explain->add_option("--id", explain_id, "image id")->required();
  explain->add_option("--format", explain_format, "text, json or csv");
  explain->add_option("--head", explain_head, "head JSON (overrides the config)");
  explain->add_option("--strategy", explain_strategy, "cbm or gpt_cbm");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (validate->parsed()) return cmd_validate(common);
    if (eval->parsed()) return cmd_eval(common, eval_strategies);
    if (probe->parsed()) return cmd_eval(common, {"linear_probe"});
    if (train->parsed()) return cmd_train_proj(common);
    if (fit->parsed()) return cmd_fit_head(common, head_strategy);
    if (tune->parsed()) return cmd_tune_threshold(scores_path, tune_out);
    if (sweep->parsed()) return cmd_sweep(common, sizes);
    if (explain->parsed()) {
      return cmd_explain(common, explain_id, explain_format, explain_head, explain_strategy);
    }
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return kExitNumerical;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  }
  return kExitConfig;
}
