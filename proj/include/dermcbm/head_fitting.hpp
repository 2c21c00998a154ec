#pragma once

#include <span>
#include <vector>

#include "dermcbm/numerics.hpp"
#include "dermcbm/strategy.hpp"

namespace dermcbm {

struct FitConfig {
  int max_iterations = 1000;
  double tolerance = 1e-6;  // on the gradient norm of the mean objective
  double l2_strength = 1.0;

  void validate() const;
};

// L2-regularized logistic regression. Binary models carry one weight column
// (the positive-class logit); multi-class models carry one column per class
// and use a softmax.
struct LogisticModel {
  Matrix weights;                  // k x 1 (binary) or k x C
  std::vector<double> intercepts;  // 1 or C entries
  std::size_t num_classes = 2;
  int iterations = 0;
  bool converged = false;

  bool binary() const { return num_classes == 2 && intercepts.size() == 1; }

  // Per-row logits: k x 1 -> N x 1, or N x C.
  Matrix decision_function(const Matrix& features) const;
  // Probability of class 1 (binary) or of `positive_class` (multi-class).
  std::vector<double> positive_probability(const Matrix& features,
                                           std::size_t positive_class = 1) const;
  std::vector<std::size_t> predict(const Matrix& features) const;
};

// Minimizes mean log-loss + l2_strength / (2N) * ||W||^2 (intercepts are not
// penalized) with L-BFGS from a zero start. Labels are class indices in
// [0, num_classes); num_classes == 2 fits the binary form.
LogisticModel fit_logistic(const Matrix& features, std::span<const std::size_t> labels,
                           std::size_t num_classes, const FitConfig& config);

LogisticModel fit_logistic_binary(const Matrix& features, std::span<const int> labels,
                                  const FitConfig& config);

struct ThresholdChoice {
  double threshold = 0.0;
  double bacc = 0.0;
};

// Threshold maximizing balanced accuracy under `score >= t -> positive`.
// Candidates are the midpoints between consecutive distinct scores plus one
// value below the minimum and one above the maximum; ties go to the smaller
// threshold.
ThresholdChoice tune_threshold(std::span<const double> scores, std::span<const int> labels);

// V = coefficients . p + intercept for each row of `concept_scores`.
std::vector<double> bottleneck_scores(const Matrix& concept_scores, const MelanomaHead& head);

// Coefficients and intercept from a logistic fit on the training concept
// scores, threshold tuned on the validation V-scores.
MelanomaHead fit_head_from_concepts(const Matrix& train_scores, std::span<const int> train_labels,
                                    const Matrix& val_scores, std::span<const int> val_labels,
                                    const FitConfig& config);

}  // namespace dermcbm
