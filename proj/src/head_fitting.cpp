#include "dermcbm/head_fitting.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dermcbm/errors.hpp"
#include "dermcbm/lbfgs.hpp"
#include "dermcbm/metrics.hpp"

namespace dermcbm {

namespace {

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void check_features(const Matrix& features, std::size_t n_labels) {
  if (features.rows() != n_labels) {
    throw DimensionError("fit_logistic: " + std::to_string(features.rows()) +
                         " feature rows for " + std::to_string(n_labels) + " labels");
  }
  if (features.rows() < 2) throw ConfigError("fit_logistic: need at least 2 samples");
  if (features.cols() == 0) throw ConfigError("fit_logistic: no feature columns");
  for (std::size_t r = 0; r < features.rows(); ++r) {
    for (std::size_t c = 0; c < features.cols(); ++c) {
      if (!std::isfinite(features(r, c))) {
        throw NumericalError("fit_logistic: non-finite feature at row " + std::to_string(r) +
                             ", column " + std::to_string(c));
      }
    }
  }
}

LbfgsOptions lbfgs_options(const FitConfig& config) {
  LbfgsOptions o;
  o.max_iterations = config.max_iterations;
  o.gradient_tolerance = config.tolerance;
  return o;
}

LogisticModel fit_binary(const Matrix& x, std::span<const std::size_t> y,
                         const FitConfig& config) {
  const std::size_t n = x.rows();
  const std::size_t k = x.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  const double lambda = config.l2_strength * inv_n;

  Objective objective = [&](const std::vector<double>& p, std::vector<double>& g) {
    std::fill(g.begin(), g.end(), 0.0);
    const std::span<const double> w(p.data(), k);
    const double b = p[k];
    double f = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double z = dot(x.row(i), w) + b;
      const double yi = static_cast<double>(y[i]);
      f += softplus(z) - yi * z;
      const double r = sigmoid(z) - yi;
      const auto xi = x.row(i);
      for (std::size_t j = 0; j < k; ++j) g[j] += r * xi[j];
      g[k] += r;
    }
    f *= inv_n;
    for (std::size_t j = 0; j <= k; ++j) g[j] *= inv_n;
    for (std::size_t j = 0; j < k; ++j) {
      f += 0.5 * lambda * p[j] * p[j];
      g[j] += lambda * p[j];
    }
    return f;
  };

  const LbfgsResult r =
      minimize_lbfgs(objective, std::vector<double>(k + 1, 0.0), lbfgs_options(config));
  LogisticModel m;
  m.weights = Matrix(k, 1, std::vector<double>(r.x.begin(), r.x.begin() + k));
  m.intercepts = {r.x[k]};
  m.num_classes = 2;
  m.iterations = r.iterations;
  m.converged = r.converged;
  return m;
}

LogisticModel fit_softmax(const Matrix& x, std::span<const std::size_t> y, std::size_t classes,
                          const FitConfig& config) {
  const std::size_t n = x.rows();
  const std::size_t k = x.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  const double lambda = config.l2_strength * inv_n;
  const std::size_t n_weights = k * classes;

  Objective objective = [&](const std::vector<double>& p, std::vector<double>& g) {
    std::fill(g.begin(), g.end(), 0.0);
    std::vector<double> z(classes);
    double f = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto xi = x.row(i);
      for (std::size_t c = 0; c < classes; ++c) z[c] = p[n_weights + c];
      for (std::size_t j = 0; j < k; ++j) {
        const double* wrow = p.data() + j * classes;
        for (std::size_t c = 0; c < classes; ++c) z[c] += xi[j] * wrow[c];
      }
      const double mx = *std::ranges::max_element(z);
      double sum = 0.0;
      for (double v : z) sum += std::exp(v - mx);
      const double lse = mx + std::log(sum);
      f += lse - z[y[i]];
      for (std::size_t c = 0; c < classes; ++c) {
        z[c] = std::exp(z[c] - lse) - (c == y[i] ? 1.0 : 0.0);
      }
      for (std::size_t j = 0; j < k; ++j) {
        double* grow = g.data() + j * classes;
        for (std::size_t c = 0; c < classes; ++c) grow[c] += xi[j] * z[c];
      }
      for (std::size_t c = 0; c < classes; ++c) g[n_weights + c] += z[c];
    }
    f *= inv_n;
    for (double& v : g) v *= inv_n;
    for (std::size_t j = 0; j < n_weights; ++j) {
      f += 0.5 * lambda * p[j] * p[j];
      g[j] += lambda * p[j];
    }
    return f;
  };

  const LbfgsResult r = minimize_lbfgs(
      objective, std::vector<double>(n_weights + classes, 0.0), lbfgs_options(config));
  LogisticModel m;
  m.weights = Matrix(k, classes, std::vector<double>(r.x.begin(), r.x.begin() + n_weights));
  m.intercepts.assign(r.x.begin() + n_weights, r.x.end());
  m.num_classes = classes;
  m.iterations = r.iterations;
  m.converged = r.converged;
  return m;
}

}  // namespace

void FitConfig::validate() const {
  if (max_iterations < 1) throw ConfigError("max_iterations must be >= 1");
  if (!(tolerance > 0.0)) throw ConfigError("tolerance must be > 0");
  if (!(l2_strength >= 0.0)) throw ConfigError("l2_strength must be >= 0");
}

Matrix LogisticModel::decision_function(const Matrix& features) const {
  if (features.cols() != weights.rows()) {
    throw DimensionError("logistic model expects " + std::to_string(weights.rows()) +
                         " features, got " + std::to_string(features.cols()));
  }
  Matrix z = matmul(features, weights);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    for (std::size_t c = 0; c < z.cols(); ++c) z(i, c) += intercepts[c];
  }
  return z;
}

std::vector<double> LogisticModel::positive_probability(const Matrix& features,
                                                        std::size_t positive_class) const {
  const Matrix z = decision_function(features);
  std::vector<double> out(features.rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (binary()) {
      out[i] = positive_class == 1 ? sigmoid(z(i, 0)) : 1.0 - sigmoid(z(i, 0));
      continue;
    }
    const auto row = z.row(i);
    const double mx = *std::ranges::max_element(row);
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - mx);
    out[i] = std::exp(row[positive_class] - mx) / sum;
  }
  return out;
}

std::vector<std::size_t> LogisticModel::predict(const Matrix& features) const {
  const Matrix z = decision_function(features);
  std::vector<std::size_t> out(features.rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (binary()) {
      out[i] = z(i, 0) >= 0.0 ? 1 : 0;
    } else {
      const auto row = z.row(i);
      out[i] = static_cast<std::size_t>(std::ranges::max_element(row) - row.begin());
    }
  }
  return out;
}

LogisticModel fit_logistic(const Matrix& features, std::span<const std::size_t> labels,
                           std::size_t num_classes, const FitConfig& config) {
  config.validate();
  check_features(features, labels.size());
  if (num_classes < 2) throw ConfigError("fit_logistic: need at least 2 classes");
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t y : labels) {
    if (y >= num_classes) {
      throw ConfigError("fit_logistic: label " + std::to_string(y) + " out of range");
    }
    ++counts[y];
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] == 0) {
      throw ConfigError("fit_logistic: class " + std::to_string(c) +
                        " is absent (single-class or incomplete input)");
    }
  }
  return num_classes == 2 ? fit_binary(features, labels, config)
                          : fit_softmax(features, labels, num_classes, config);
}

LogisticModel fit_logistic_binary(const Matrix& features, std::span<const int> labels,
                                  const FitConfig& config) {
  std::vector<std::size_t> y(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) {
      throw ConfigError("fit_logistic: binary label must be 0 or 1");
    }
    y[i] = static_cast<std::size_t>(labels[i]);
  }
  return fit_logistic(features, y, 2, config);
}

ThresholdChoice tune_threshold(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError("tune_threshold: " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(labels.size()) + " labels");
  }
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ConfigError("tune_threshold: labels must be 0/1");
    if (!std::isfinite(scores[i])) throw NumericalError("tune_threshold: non-finite score");
    n_pos += static_cast<std::size_t>(labels[i]);
  }
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ConfigError("tune_threshold: labels contain a single class");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::ranges::sort(order, [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Distinct scores ascending, with how many positives/negatives sit at or
  // above each one.
  std::vector<double> distinct;
  std::vector<std::size_t> pos_below, neg_below;  // strictly below distinct[u]
  std::size_t pos_seen = 0, neg_seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    distinct.push_back(s);
    pos_below.push_back(pos_seen);
    neg_below.push_back(neg_seen);
    for (; i < order.size() && scores[order[i]] == s; ++i) {
      (labels[order[i]] == 1 ? pos_seen : neg_seen) += 1;
    }
  }

  // BACC = (tp * n_neg + tn * n_pos) / (2 * n_pos * n_neg); candidates are
  // compared on the integer numerator so equal BACCs tie exactly.
  auto numerator_with_first_positive = [&](std::size_t u) {
    // Predict positive for distinct[u] and above; u == size() means none.
    const std::size_t pb = u < distinct.size() ? pos_below[u] : n_pos;
    const std::size_t nb = u < distinct.size() ? neg_below[u] : n_neg;
    return (n_pos - pb) * n_neg + nb * n_pos;
  };

  const double margin =
      1e-6 * std::max({1.0, std::abs(distinct.front()), std::abs(distinct.back())});
  double best_t = distinct.front() - margin;
  std::size_t best_num = numerator_with_first_positive(0);
  for (std::size_t u = 1; u <= distinct.size(); ++u) {
    const std::size_t num = numerator_with_first_positive(u);
    if (num <= best_num) continue;
    best_num = num;
    if (u == distinct.size()) {
      best_t = distinct.back() + margin;
    } else {
      best_t = 0.5 * (distinct[u - 1] + distinct[u]);
      // Adjacent doubles: the midpoint may round onto the lower score.
      if (best_t <= distinct[u - 1]) best_t = distinct[u];
    }
  }
  const ThresholdChoice best{
      best_t, static_cast<double>(best_num) / (2.0 * static_cast<double>(n_pos * n_neg))};
  return best;
}

std::vector<double> bottleneck_scores(const Matrix& concept_scores, const MelanomaHead& head) {
  if (concept_scores.cols() != head.coefficients.size()) {
    throw DimensionError("bottleneck_scores: " + std::to_string(concept_scores.cols()) +
                         " concept columns for " + std::to_string(head.coefficients.size()) +
                         " coefficients");
  }
  std::vector<double> v(concept_scores.rows());
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = dot(head.coefficients, concept_scores.row(i)) + head.intercept;
  }
  return v;
}

MelanomaHead fit_head_from_concepts(const Matrix& train_scores, std::span<const int> train_labels,
                                    const Matrix& val_scores, std::span<const int> val_labels,
                                    const FitConfig& config) {
  const LogisticModel model = fit_logistic_binary(train_scores, train_labels, config);
  MelanomaHead head;
  head.coefficients.assign(model.weights.data().begin(), model.weights.data().end());
  head.intercept = model.intercepts.front();
  head.threshold = tune_threshold(bottleneck_scores(val_scores, head), val_labels).threshold;
  return head;
}

}  // namespace dermcbm
