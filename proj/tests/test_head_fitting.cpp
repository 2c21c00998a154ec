#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "dermcbm/errors.hpp"
#include "dermcbm/head_fitting.hpp"
#include "dermcbm/lbfgs.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace dermcbm;
using namespace dermcbm::testing;

namespace {

struct Toy {
  Matrix x;
  std::vector<int> y;
};

Toy blobs(Rng& rng, std::size_t n, double separation, double sd) {
  Toy t{Matrix(n, 2), {}};
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const double c = label == 1 ? separation : -separation;
    t.x(i, 0) = c + sd * rng.normal();
    t.x(i, 1) = 0.5 * c + sd * rng.normal();
    t.y.push_back(label);
  }
  return t;
}

std::vector<double> sorted_candidates(std::vector<double> s) {
  std::ranges::sort(s);
  s.erase(std::unique(s.begin(), s.end()), s.end());
  const double margin = 1e-6 * std::max({1.0, std::abs(s.front()), std::abs(s.back())});
  std::vector<double> out{s.front() - margin};
  for (std::size_t i = 1; i < s.size(); ++i) out.push_back(0.5 * (s[i - 1] + s[i]));
  out.push_back(s.back() + margin);
  return out;
}

}  // namespace

TEST(Lbfgs, MinimizesQuadratic) {
  const Objective f = [](const std::vector<double>& x, std::vector<double>& g) {
    double v = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double w = static_cast<double>(i + 1);
      const double d = x[i] - static_cast<double>(i);
      v += 0.5 * w * d * d;
      g[i] = w * d;
    }
    return v;
  };
  const LbfgsResult r = minimize_lbfgs(f, std::vector<double>(5, 10.0), {});
  EXPECT_TRUE(r.converged);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(r.x[i], static_cast<double>(i), 1e-6);
}

TEST(FitLogistic, SeparableBlobsFitPerfectly) {
  Rng rng(51);
  const Toy t = blobs(rng, 50, 2.0, 0.5);
  const LogisticModel m = fit_logistic_binary(t.x, t.y, FitConfig{});
  EXPECT_TRUE(m.binary());
  const auto pred = m.predict(t.x);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(static_cast<int>(pred[i]), t.y[i]);
}

TEST(FitLogistic, LabelFlipNegatesModel) {
  Rng rng(52);
  for (int trial = 0; trial < 5; ++trial) {
    const Toy t = blobs(rng, 40, 0.6, 1.0);
    std::vector<int> flipped = t.y;
    for (int& v : flipped) v = 1 - v;
    FitConfig c;
    c.tolerance = 1e-10;
    const LogisticModel a = fit_logistic_binary(t.x, t.y, c);
    const LogisticModel b = fit_logistic_binary(t.x, flipped, c);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(a.weights(k, 0), -b.weights(k, 0), 1e-6);
    EXPECT_NEAR(a.intercepts[0], -b.intercepts[0], 1e-6);
  }
}

TEST(FitLogistic, StrongerPenaltyShrinksWeights) {
  Rng rng(53);
  const Toy t = blobs(rng, 60, 0.8, 1.0);
  double previous = std::numeric_limits<double>::infinity();
  for (double l2 : {0.1, 1.0, 10.0, 100.0}) {
    FitConfig c;
    c.l2_strength = l2;
    const LogisticModel m = fit_logistic_binary(t.x, t.y, c);
    const double n = std::hypot(m.weights(0, 0), m.weights(1, 0));
    EXPECT_LT(n, previous) << "l2 " << l2;
    previous = n;
  }
}

TEST(FitLogistic, ConstantColumnIsAbsorbedByIntercept) {
  Rng rng(54);
  for (int trial = 0; trial < 5; ++trial) {
    const Toy t = blobs(rng, 30, 0.7, 1.0);
    Matrix wide(30, 3);
    for (std::size_t i = 0; i < 30; ++i) {
      wide(i, 0) = t.x(i, 0);
      wide(i, 1) = t.x(i, 1);
      wide(i, 2) = 1.0;
    }
    FitConfig c;
    c.l2_strength = 0.0;
    c.tolerance = 1e-9;
    const auto p = fit_logistic_binary(t.x, t.y, c).positive_probability(t.x);
    const auto q = fit_logistic_binary(wide, t.y, c).positive_probability(wide);
    for (std::size_t i = 0; i < 30; ++i) EXPECT_NEAR(p[i], q[i], 1e-4);
  }
}

TEST(FitLogistic, DeterministicAndMulticlass) {
  Rng rng(55);
  Matrix x(90, 2);
  std::vector<std::size_t> y;
  for (std::size_t i = 0; i < 90; ++i) {
    const std::size_t c = i % 3;
    const double angle = 2.0943951023931953 * static_cast<double>(c);
    x(i, 0) = 3 * std::cos(angle) + 0.4 * rng.normal();
    x(i, 1) = 3 * std::sin(angle) + 0.4 * rng.normal();
    y.push_back(c);
  }
  const LogisticModel a = fit_logistic(x, y, 3, FitConfig{});
  const LogisticModel b = fit_logistic(x, y, 3, FitConfig{});
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(a.intercepts, b.intercepts);
  EXPECT_FALSE(a.binary());
  EXPECT_EQ(a.predict(x), y);
  const auto p = a.positive_probability(x, 2);
  for (std::size_t i = 0; i < 90; ++i) EXPECT_EQ(p[i] > 0.5, y[i] == 2);
}

TEST(FitLogistic, Errors) {
  const Matrix x{{1}, {2}, {3}};
  EXPECT_THROW(fit_logistic_binary(x, std::vector<int>{1, 1, 1}, {}), ConfigError);
  EXPECT_THROW(fit_logistic_binary(x, std::vector<int>{0, 1}, {}), DimensionError);
  EXPECT_THROW(fit_logistic_binary(Matrix{{1}, {std::nan("")}}, std::vector<int>{0, 1}, {}),
               NumericalError);
  EXPECT_THROW(fit_logistic(x, std::vector<std::size_t>{0, 1, 1}, 3, {}), ConfigError);
  FitConfig bad;
  bad.max_iterations = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = {};
  bad.l2_strength = -1;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(TuneThreshold, PerfectSeparationPicksMidpoint) {
  const ThresholdChoice c = tune_threshold(std::vector<double>{0.1, 0.9}, std::vector<int>{0, 1});
  EXPECT_DOUBLE_EQ(c.threshold, 0.5);
  EXPECT_EQ(c.bacc, 1.0);
}

TEST(TuneThreshold, EqualScoresPredictAllPositive) {
  const ThresholdChoice c =
      tune_threshold(std::vector<double>{0.3, 0.3, 0.3}, std::vector<int>{0, 1, 0});
  EXPECT_EQ(c.bacc, 0.5);
  EXPECT_LT(c.threshold, 0.3);
}

TEST(TuneThreshold, EqualsExhaustiveCandidateScan) {
  Rng rng(56);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = t == 0 ? 50 : 2 + rng.below(60);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng.below(2));
      s[i] = std::round(rng.normal(y[i] * 0.7, 1.0) * 8.0) / 8.0;  // forces ties
    }
    y[0] = 0;
    y[1] = 1;
    double best_t = 0;
    std::uint64_t best_num = 0;
    for (double cand : sorted_candidates(s)) {
      const std::uint64_t num = oracle::bacc_numerator_at(s, y, cand);
      if (num > best_num) {
        best_num = num;
        best_t = cand;
      }
    }
    const ThresholdChoice c = tune_threshold(s, y);
    EXPECT_EQ(c.threshold, best_t);
    EXPECT_NEAR(c.bacc, oracle::bacc_at(s, y, best_t), 1e-15);
    EXPECT_NEAR(oracle::bacc_at(s, y, c.threshold), c.bacc, 1e-15);
  }
}

TEST(TuneThreshold, AdjacentDoublesStillSplit) {
  const double a = 1.0;
  const double b = std::nextafter(a, 2.0);
  const ThresholdChoice c = tune_threshold(std::vector<double>{a, b}, std::vector<int>{0, 1});
  EXPECT_EQ(c.bacc, 1.0);
  EXPECT_GT(c.threshold, a);
  EXPECT_LE(c.threshold, b);
}

TEST(TuneThreshold, Errors) {
  EXPECT_THROW(tune_threshold(std::vector<double>{1, 2}, std::vector<int>{1, 1}), ConfigError);
  EXPECT_THROW(tune_threshold(std::vector<double>{1}, std::vector<int>{1, 0}), DimensionError);
  EXPECT_THROW(tune_threshold(std::vector<double>{1, 2}, std::vector<int>{2, 0}), ConfigError);
}

namespace {

struct ConceptData {
  Matrix p;
  std::vector<int> y;
};

// Concept scores as noisy one-hot class indicators: concept 0 fires for
// melanoma, concept 1 for the rest.
ConceptData one_hot(Rng& rng, std::size_t n, double sigma) {
  ConceptData d{Matrix(n, 2), {}};
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    d.p(i, 0) = (y == 1 ? 1.0 : 0.0) + sigma * rng.normal();
    d.p(i, 1) = (y == 1 ? 0.0 : 1.0) + sigma * rng.normal();
    d.y.push_back(y);
  }
  return d;
}

}  // namespace

TEST(FitHead, OneHotConceptsGiveNearPerfectValidation) {
  Rng rng(57);
  const ConceptData train = one_hot(rng, 100, 0.05);
  const ConceptData val = one_hot(rng, 100, 0.05);
  const MelanomaHead head = fit_head_from_concepts(train.p, train.y, val.p, val.y, {});
  EXPECT_GT(head.coefficients[0], 0);
  EXPECT_LT(head.coefficients[1], 0);
  const auto v = bottleneck_scores(val.p, head);
  EXPECT_GE(oracle::bacc_at(v, val.y, head.threshold), 0.99);
}

TEST(FitHead, ValidationEqualToTrainMaximizesTrainBacc) {
  Rng rng(58);
  const ConceptData train = one_hot(rng, 60, 0.6);
  const MelanomaHead head = fit_head_from_concepts(train.p, train.y, train.p, train.y, {});
  const auto v = bottleneck_scores(train.p, head);
  EXPECT_EQ(head.threshold, tune_threshold(v, train.y).threshold);
}

TEST(FitHead, ValidationOrderDoesNotMatter) {
  Rng rng(59);
  const ConceptData train = one_hot(rng, 60, 0.5);
  const ConceptData val = one_hot(rng, 40, 0.5);
  std::vector<std::size_t> perm(40);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<int> yp;
  for (std::size_t i : perm) yp.push_back(val.y[i]);
  const MelanomaHead a = fit_head_from_concepts(train.p, train.y, val.p, val.y, {});
  const MelanomaHead b = fit_head_from_concepts(train.p, train.y, val.p.select_rows(perm), yp, {});
  EXPECT_EQ(a, b);
}

TEST(BottleneckScores, WidthMismatch) {
  EXPECT_THROW(bottleneck_scores(Matrix(2, 3), MelanomaHead{{1, 2}, 0, 0}), DimensionError);
}
