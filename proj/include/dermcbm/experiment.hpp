#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "dermcbm/contrastive.hpp"
#include "dermcbm/embed_store.hpp"
#include "dermcbm/explain.hpp"
#include "dermcbm/head_fitting.hpp"
#include "dermcbm/metrics.hpp"
#include "dermcbm/strategy.hpp"

namespace dermcbm {

enum class ProjectionMode { kTrain, kIdentity, kCheckpoint };

struct FixedSplits {
  std::filesystem::path train;
  std::filesystem::path val;
  std::filesystem::path test;
};

// Cross-validation over one image file. The validation split of every fold is
// a stratified holdout of that fold's training portion.
struct KFoldSplits {
  std::filesystem::path images;
  std::size_t k = 5;
  double inner_val_fraction = 0.2;
};

// Declarative description of one experiment. Relative paths in the JSON file
// are resolved against the file's directory.
struct ExperimentConfig {
  std::vector<std::string> classes;
  std::string positive_class;
  std::filesystem::path class_texts;  // ids are class names
  std::optional<std::filesystem::path> concept_file;
  std::vector<std::filesystem::path> concept_embeddings;
  std::optional<std::filesystem::path> descriptor_embeddings;
  std::variant<FixedSplits, KFoldSplits> splits;
  std::vector<Strategy> strategies;
  ProjectionMode projection = ProjectionMode::kTrain;
  std::optional<std::filesystem::path> checkpoint;
  TrainConfig train;
  FitConfig fit;
  std::optional<std::filesystem::path> head_file;
  bool tune_head_threshold = true;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output_dir;

  bool needs_concepts() const;
};

ExperimentConfig parse_experiment_config(const nlohmann::json& j,
                                         const std::filesystem::path& base_dir);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Every inconsistency found (missing files, dimension mismatches, class or
// concept count mismatches), without side effects. Empty means valid.
std::vector<std::string> validate_config(const ExperimentConfig& config);

// Everything an experiment reads from disk, loaded and cross-checked once.
struct ExperimentData {
  LabelSpace space;
  EmbeddingSet class_texts;
  Matrix class_text_matrix;  // rows in label-space order
  std::optional<ConceptSet> concepts;
  std::optional<MelanomaHead> head_file;
  std::optional<EmbeddingSet> train, val, test;  // fixed splits
  std::optional<EmbeddingSet> all_images;        // k-fold
};

ExperimentData load_experiment_data(const ExperimentConfig& config);

struct SplitSet {
  EmbeddingSet train;
  EmbeddingSet val;
  EmbeddingSet test;
  std::string tag;
};

// One split for fixed splits, k for cross-validation (folds drawn from `seed`).
std::vector<SplitSet> splits_for_seed(const ExperimentConfig& config, const ExperimentData& data,
                                      std::uint64_t seed);

std::vector<std::size_t> class_indices(const EmbeddingSet& set, const LabelSpace& space);
std::vector<int> melanoma_truth(const EmbeddingSet& set, const LabelSpace& space);

struct SplitOutcome {
  std::vector<EvalReport> reports;                    // in requested strategy order
  std::map<Strategy, std::vector<double>> test_scores;  // continuous score per test row
  std::vector<int> test_truth;
  ProjectionPair projections;
  std::optional<TrainLog> train_log;
  std::map<Strategy, MelanomaHead> heads;
  std::optional<LogisticModel> probe;
};

// Trains (or loads) projections for the split according to config.projection.
ProjectionPair obtain_projections(const ExperimentConfig& config, const ExperimentData& data,
                                  const SplitSet& split, std::uint64_t seed,
                                  std::optional<TrainLog>* log);

// Head for a bottleneck strategy: the configured head file (threshold re-tuned
// on validation unless disabled) or a fresh logistic fit on the train split.
MelanomaHead obtain_head(const ExperimentConfig& config, const ExperimentData& data,
                         const Matrix& train_scores, std::span<const int> train_truth,
                         const Matrix& val_scores, std::span<const int> val_truth);

Matrix concept_scores_for(Strategy strategy, const Matrix& images, const ConceptSet& concepts,
                          const ProjectionPair& proj);

SplitOutcome evaluate_split(const ExperimentConfig& config, const ExperimentData& data,
                            const SplitSet& split, std::uint64_t seed,
                            const std::vector<Strategy>& strategies);

struct ExperimentResult {
  std::vector<EvalReport> runs;  // one per (seed, strategy)
  nlohmann::json report;         // exactly what report.json holds
};

// Runs every seed and strategy, writing under config.output_dir:
// report.json, roc_<strategy>.csv, explanations/<id>.csv, checkpoints/, run.log.
ExperimentResult run_experiment(const ExperimentConfig& config);

struct SweepRow {
  std::size_t size = 0;
  double auc_mean = 0.0;
  double auc_std = 0.0;
  std::vector<double> aucs;  // one per seed
};

// CBM test AUC after retraining on stratified subsamples of the train split.
// Writes sweep.csv (size,auc_mean,auc_std) under config.output_dir.
std::vector<SweepRow> run_size_sweep(const ExperimentConfig& config,
                                     const std::vector<std::size_t>& sizes);

std::string sweep_csv(const std::vector<SweepRow>& rows);

// File-name-safe form of an image id.
std::string sanitize_id(const std::string& id);

}  // namespace dermcbm
