#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dermcbm/embed_store.hpp"

namespace dermcbm {

// 1/2 (TP / (TP + FN) + TN / (TN + FP)). Entries must be 0 or 1; truth must
// contain both classes.
double balanced_accuracy(std::span<const int> pred, std::span<const int> truth);

// Mean per-class recall over the classes that occur in `truth`.
double balanced_accuracy_multiclass(std::span<const std::size_t> pred,
                                    std::span<const std::size_t> truth,
                                    std::size_t num_classes);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  friend bool operator==(const RocPoint&, const RocPoint&) = default;
};

struct RocResult {
  double auc = 0.0;
  std::vector<RocPoint> points;  // (0,0) ... (1,1), one step per distinct score
};

// Trapezoidal area under the ROC staircase. Equal scores form one threshold
// step, so the area equals the Mann-Whitney statistic with ties counted 1/2.
RocResult roc_auc(std::span<const double> scores, std::span<const int> truth);

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Stratified k-fold: each class's indices are shuffled with `seed` and dealt
// round-robin, so per-class counts in the test folds differ by at most one.
std::vector<Fold> stratified_kfold(const std::vector<std::string>& labels, std::size_t k,
                                   std::uint64_t seed);

// Stratified subsample of `n` indices (returned ascending). Allocation is
// proportional with largest remainders; every class keeps at least one item.
// n equal to labels.size() returns every index.
std::vector<std::size_t> stratified_subsample(const std::vector<std::string>& labels,
                                              std::size_t n, std::uint64_t seed);

// Splits indices into (kept, held_out) with about `fraction` of every class
// held out (at least one, and never a whole class of two or more).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_holdout(
    const std::vector<std::string>& labels, double fraction, std::uint64_t seed);

// 1 where the predicted class is the positive class, else 0.
std::vector<int> multiclass_to_binary(std::span<const std::size_t> pred_class,
                                      const LabelSpace& space);

enum class Strategy { kBaseline, kCbm, kGptCbm, kLinearProbe };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

struct EvalReport {
  Strategy strategy = Strategy::kBaseline;
  double bacc = 0.0;
  std::optional<double> auc;
  // Set when predictions are multi-class (e.g. 7-way baseline): BACC over all
  // classes, next to the melanoma-vs-rest `bacc`.
  std::optional<double> bacc_multiclass;
  std::vector<RocPoint> roc_points;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  std::string split_tag;
  std::int64_t run_seed = 0;
};

nlohmann::json to_json(const EvalReport& r);

// "fpr,tpr" header then one line per point.
std::string roc_csv(std::span<const RocPoint> points);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

MeanStd mean_std(std::span<const double> values);

}  // namespace dermcbm
