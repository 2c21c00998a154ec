#include "dermcbm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include "dermcbm/errors.hpp"
#include "dermcbm/rng.hpp"

namespace dermcbm {

namespace {

void check_binary(std::span<const int> v, const char* what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] != 0 && v[i] != 1) {
      throw ConfigError(std::string(what) + "[" + std::to_string(i) + "] is " +
                        std::to_string(v[i]) + ", expected 0 or 1");
    }
  }
}

// Indices grouped by class, classes in sorted-name order.
std::map<std::string, std::vector<std::size_t>> group_by_class(
    const std::vector<std::string>& labels) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
  return groups;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

double balanced_accuracy(std::span<const int> pred, std::span<const int> truth) {
  if (pred.size() != truth.size()) {
    throw DimensionError("balanced_accuracy: " + std::to_string(pred.size()) +
                         " predictions for " + std::to_string(truth.size()) + " labels");
  }
  check_binary(pred, "pred");
  check_binary(truth, "truth");
  std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (truth[i] == 1) {
      (pred[i] == 1 ? tp : fn) += 1;
    } else {
      (pred[i] == 0 ? tn : fp) += 1;
    }
  }
  if (tp + fn == 0 || tn + fp == 0) {
    throw ConfigError("balanced_accuracy: truth contains a single class");
  }
  return 0.5 * (static_cast<double>(tp) / static_cast<double>(tp + fn) +
                static_cast<double>(tn) / static_cast<double>(tn + fp));
}

double balanced_accuracy_multiclass(std::span<const std::size_t> pred,
                                    std::span<const std::size_t> truth,
                                    std::size_t num_classes) {
  if (pred.size() != truth.size()) {
    throw DimensionError("balanced_accuracy_multiclass: length mismatch");
  }
  std::vector<std::size_t> support(num_classes, 0), hits(num_classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= num_classes || pred[i] >= num_classes) {
      throw ConfigError("balanced_accuracy_multiclass: class index out of range");
    }
    ++support[truth[i]];
    if (pred[i] == truth[i]) ++hits[truth[i]];
  }
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (support[c] == 0) continue;
    sum += static_cast<double>(hits[c]) / static_cast<double>(support[c]);
    ++present;
  }
  if (present == 0) throw ConfigError("balanced_accuracy_multiclass: empty input");
  return sum / static_cast<double>(present);
}

RocResult roc_auc(std::span<const double> scores, std::span<const int> truth) {
  if (scores.size() != truth.size()) {
    throw DimensionError("roc_auc: " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(truth.size()) + " labels");
  }
  check_binary(truth, "truth");
  const auto n_pos = static_cast<std::size_t>(std::ranges::count(truth, 1));
  const std::size_t n_neg = truth.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ConfigError("roc_auc: truth contains a single class");
  for (double s : scores) {
    if (!std::isfinite(s)) throw NumericalError("roc_auc: non-finite score");
  }

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::ranges::sort(order, [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocResult out;
  out.points.push_back({0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  double area2 = 0.0;  // twice the area, in units of n_pos * n_neg
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    const std::size_t tp0 = tp, fp0 = fp;
    for (; i < order.size() && scores[order[i]] == s; ++i) {
      (truth[order[i]] == 1 ? tp : fp) += 1;
    }
    area2 += static_cast<double>(fp - fp0) * static_cast<double>(tp + tp0);
    out.points.push_back({static_cast<double>(fp) / static_cast<double>(n_neg),
                          static_cast<double>(tp) / static_cast<double>(n_pos)});
  }
  out.auc = area2 / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
  return out;
}

std::vector<Fold> stratified_kfold(const std::vector<std::string>& labels, std::size_t k,
                                   std::uint64_t seed) {
  if (k < 2) throw ConfigError("stratified_kfold: k must be >= 2");
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> tests(k);
  std::size_t next = 0;
  for (auto& [name, idx] : group_by_class(labels)) {
    if (idx.size() < k) {
      throw ConfigError("stratified_kfold: class \"" + name + "\" has " +
                        std::to_string(idx.size()) + " members, fewer than k = " +
                        std::to_string(k));
    }
    rng.shuffle(std::span<std::size_t>(idx));
    for (std::size_t i : idx) {
      tests[next].push_back(i);
      next = (next + 1) % k;
    }
  }
  std::vector<Fold> folds(k);
  for (std::size_t f = 0; f < k; ++f) {
    std::ranges::sort(tests[f]);
    folds[f].test = tests[f];
    for (std::size_t g = 0; g < k; ++g) {
      if (g != f) folds[f].train.insert(folds[f].train.end(), tests[g].begin(), tests[g].end());
    }
    std::ranges::sort(folds[f].train);
  }
  return folds;
}

std::vector<std::size_t> stratified_subsample(const std::vector<std::string>& labels,
                                              std::size_t n, std::uint64_t seed) {
  if (n > labels.size()) {
    throw ConfigError("stratified_subsample: size " + std::to_string(n) + " exceeds the " +
                      std::to_string(labels.size()) + " available items");
  }
  std::vector<std::size_t> all(labels.size());
  std::iota(all.begin(), all.end(), 0);
  if (n == labels.size()) return all;

  auto groups = group_by_class(labels);
  if (n < groups.size()) {
    throw ConfigError("stratified_subsample: size " + std::to_string(n) +
                      " cannot cover " + std::to_string(groups.size()) + " classes");
  }
  // One per class first, then the rest by largest remainder of the quota.
  struct Share {
    std::vector<std::size_t>* idx;
    std::size_t take;
    double remainder;
  };
  std::vector<Share> shares;
  std::size_t assigned = 0;
  const std::size_t extra = n - groups.size();
  const std::size_t pool = labels.size() - groups.size();
  for (auto& [name, idx] : groups) {
    const double quota = pool == 0 ? 0.0
                                   : static_cast<double>(extra) *
                                         static_cast<double>(idx.size() - 1) /
                                         static_cast<double>(pool);
    const auto base = static_cast<std::size_t>(std::floor(quota));
    shares.push_back({&idx, 1 + base, quota - static_cast<double>(base)});
    assigned += 1 + base;
  }
  std::vector<std::size_t> by_remainder(shares.size());
  std::iota(by_remainder.begin(), by_remainder.end(), 0);
  std::ranges::stable_sort(by_remainder, [&](std::size_t a, std::size_t b) {
    return shares[a].remainder > shares[b].remainder;
  });
  for (std::size_t r = 0; assigned < n; r = (r + 1) % shares.size()) {
    Share& s = shares[by_remainder[r]];
    if (s.take < s.idx->size()) {
      ++s.take;
      ++assigned;
    }
  }

  Rng rng(seed);
  std::vector<std::size_t> out;
  for (Share& s : shares) {
    std::vector<std::size_t> idx = *s.idx;
    rng.shuffle(std::span<std::size_t>(idx));
    out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(s.take));
  }
  std::ranges::sort(out);
  return out;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_holdout(
    const std::vector<std::string>& labels, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ConfigError("stratified_holdout: fraction must be in (0, 1)");
  }
  Rng rng(seed);
  std::vector<std::size_t> kept, held;
  for (auto& [name, idx] : group_by_class(labels)) {
    rng.shuffle(std::span<std::size_t>(idx));
    auto take = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    take = std::max<std::size_t>(take, 1);
    if (idx.size() >= 2) take = std::min(take, idx.size() - 1);
    held.insert(held.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
    kept.insert(kept.end(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end());
  }
  std::ranges::sort(kept);
  std::ranges::sort(held);
  return {kept, held};
}

std::vector<int> multiclass_to_binary(std::span<const std::size_t> pred_class,
                                      const LabelSpace& space) {
  std::vector<int> out(pred_class.size());
  for (std::size_t i = 0; i < pred_class.size(); ++i) {
    if (pred_class[i] >= space.size()) {
      throw ConfigError("multiclass_to_binary: class index " + std::to_string(pred_class[i]) +
                        " out of range for " + std::to_string(space.size()) + " classes");
    }
    out[i] = pred_class[i] == space.positive_index() ? 1 : 0;
  }
  return out;
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kBaseline: return "baseline";
    case Strategy::kCbm: return "cbm";
    case Strategy::kGptCbm: return "gpt_cbm";
    case Strategy::kLinearProbe: return "linear_probe";
  }
  return "unknown";
}

Strategy strategy_from_string(const std::string& s) {
  for (Strategy st : {Strategy::kBaseline, Strategy::kCbm, Strategy::kGptCbm,
                      Strategy::kLinearProbe}) {
    if (to_string(st) == s) return st;
  }
  throw ConfigError("unknown strategy \"" + s + "\"");
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json roc = nlohmann::json::array();
  for (const auto& p : r.roc_points) roc.push_back({p.fpr, p.tpr});
  nlohmann::json j{{"strategy", to_string(r.strategy)},
                   {"bacc", r.bacc},
                   {"auc", r.auc ? nlohmann::json(*r.auc) : nlohmann::json(nullptr)},
                   {"roc_points", roc},
                   {"n_pos", r.n_pos},
                   {"n_neg", r.n_neg},
                   {"split_tag", r.split_tag},
                   {"run_seed", r.run_seed}};
  if (r.bacc_multiclass) j["bacc_multiclass"] = *r.bacc_multiclass;
  return j;
}

std::string roc_csv(std::span<const RocPoint> points) {
  std::string out = "fpr,tpr\n";
  for (const auto& p : points) out += format_double(p.fpr) + "," + format_double(p.tpr) + "\n";
  return out;
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) return {};
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

}  // namespace dermcbm
