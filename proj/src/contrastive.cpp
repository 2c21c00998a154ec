#include "dermcbm/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>

#include "dermcbm/config_json.hpp"
#include "dermcbm/errors.hpp"
#include "dermcbm/rng.hpp"

namespace dermcbm {

namespace {

using json = nlohmann::json;

struct Normalized {
  Matrix unit;                // rows scaled to unit norm
  std::vector<double> norms;  // original row norms
};

Normalized normalize_projected(const Matrix& m, const char* side) {
  Normalized out{m, std::vector<double>(m.rows())};
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double n = norm(m.row(i));
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw NumericalError(std::string("degenerate cosine: projected ") + side +
                           " vector " + std::to_string(i) + " has norm " +
                           std::to_string(n));
    }
    out.norms[i] = n;
    for (double& v : out.unit.row(i)) v /= n;
  }
  return out;
}

// Row-wise log-softmax.
Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    const double mx = *std::ranges::max_element(row);
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < row.size(); ++j) out(i, j) = row[j] - lse;
  }
  return out;
}

Matrix row_normalized(const Matrix& m) {
  Matrix out = m;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double s = 0.0;
    for (double v : m.row(i)) s += v;
    if (s <= 0.0) throw ConfigError("target row " + std::to_string(i) + " sums to zero");
    for (double& v : out.row(i)) v /= s;
  }
  return out;
}

// Soft-label cross-entropy summed over rows, plus d(loss)/d(logits).
double soft_cross_entropy(const Matrix& logits, const Matrix& target, Matrix* grad) {
  const Matrix logp = log_softmax_rows(logits);
  double loss = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    double target_mass = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) {
      if (target(i, j) != 0.0) loss -= target(i, j) * logp(i, j);
      target_mass += target(i, j);
    }
    if (grad != nullptr) {
      for (std::size_t j = 0; j < logits.cols(); ++j) {
        (*grad)(i, j) = target_mass * std::exp(logp(i, j)) - target(i, j);
      }
    }
  }
  return loss;
}

void check_batch(const Matrix& images, const Matrix& texts, const ProjectionPair& proj,
                 const TargetMatrix& target) {
  const std::size_t b = images.rows();
  if (b == 0) throw ConfigError("contrastive_loss: empty batch");
  if (texts.rows() != b) {
    throw DimensionError("contrastive_loss: " + std::to_string(b) + " images but " +
                         std::to_string(texts.rows()) + " texts");
  }
  const std::size_t d = proj.dim();
  if (images.cols() != d || texts.cols() != d || proj.w_text.rows() != d) {
    throw DimensionError("contrastive_loss: embedding dimension does not match projections");
  }
  if (target.values.rows() != b || target.values.cols() != b) {
    throw DimensionError("contrastive_loss: target matrix is not " + std::to_string(b) +
                         "x" + std::to_string(b));
  }
}

struct Forward {
  Normalized img;
  Normalized txt;
  Matrix logits;
};

Forward forward(const Matrix& images, const Matrix& texts, const ProjectionPair& proj) {
  Forward f{normalize_projected(matmul_transposed(images, proj.w_image), "image"),
            normalize_projected(matmul_transposed(texts, proj.w_text), "text"),
            {}};
  f.logits = matmul_transposed(f.img.unit, f.txt.unit);
  for (double& v : f.logits.data()) v *= proj.logit_scale;
  return f;
}

// Back-propagate through row normalization: d/du of u/|u|.
Matrix unnormalize_grad(const Matrix& grad_unit, const Normalized& n) {
  Matrix out(grad_unit.rows(), grad_unit.cols());
  for (std::size_t i = 0; i < grad_unit.rows(); ++i) {
    const auto g = grad_unit.row(i);
    const auto u = n.unit.row(i);
    const double radial = dot(g, u);
    for (std::size_t c = 0; c < g.size(); ++c) {
      out(i, c) = (g[c] - u[c] * radial) / n.norms[i];
    }
  }
  return out;
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

}  // namespace

ProjectionPair ProjectionPair::identity(std::size_t d, double logit_scale) {
  return {Matrix::identity(d), Matrix::identity(d), logit_scale};
}

void ProjectionPair::validate() const {
  const std::size_t d = w_image.rows();
  if (d == 0 || w_image.cols() != d || w_text.rows() != d || w_text.cols() != d) {
    throw ConfigError("projection matrices must both be d x d");
  }
  if (!w_image.all_finite() || !w_text.all_finite()) {
    throw NumericalError("projection matrices contain non-finite entries");
  }
  if (!(logit_scale > 0.0)) throw ConfigError("logit_scale must be positive");
}

Matrix apply_projection(const ProjectionPair& proj, const Matrix& emb, ProjectionSide side) {
  const Matrix& w = side == ProjectionSide::kImage ? proj.w_image : proj.w_text;
  if (emb.cols() != w.cols()) {
    throw DimensionError("apply_projection: embedding dimension " +
                         std::to_string(emb.cols()) + " vs projection " +
                         std::to_string(w.cols()));
  }
  return matmul_transposed(emb, w);
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(lr_factor > 0.0 && lr_factor < 1.0)) throw ConfigError("lr_factor must be in (0, 1)");
  if (lr_patience < 0) throw ConfigError("lr_patience must be >= 0");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (max_epochs < 0) throw ConfigError("max_epochs must be >= 0");
  if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be >= 1");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("adam betas must be in [0, 1)");
  }
  if (!(adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be > 0");
  if (!(logit_scale > 0.0)) throw ConfigError("logit_scale must be > 0");
  if (init_noise < 0.0) throw ConfigError("init_noise must be >= 0");
}

TargetMatrix build_target_matrix(const std::vector<std::string>& batch_labels) {
  const std::size_t b = batch_labels.size();
  if (b == 0) throw ConfigError("build_target_matrix: empty batch");
  std::map<std::string, std::size_t> counts;
  for (const auto& l : batch_labels) ++counts[l];
  TargetMatrix t{Matrix(b, b)};
  for (std::size_t i = 0; i < b; ++i) {
    const double share = 1.0 / static_cast<double>(counts[batch_labels[i]]);
    for (std::size_t j = 0; j < b; ++j) {
      if (batch_labels[i] == batch_labels[j]) t.values(i, j) = share;
    }
  }
  return t;
}

double contrastive_loss_value(const Matrix& image_batch, const Matrix& text_batch,
                              const ProjectionPair& proj, const TargetMatrix& target) {
  check_batch(image_batch, text_batch, proj, target);
  const Forward f = forward(image_batch, text_batch, proj);
  const double b = static_cast<double>(image_batch.rows());
  const double image_to_text = soft_cross_entropy(f.logits, target.values, nullptr);
  const double text_to_image = soft_cross_entropy(
      f.logits.transpose(), row_normalized(target.values.transpose()), nullptr);
  return 0.5 * (image_to_text + text_to_image) / b;
}

LossAndGrad contrastive_loss(const Matrix& image_batch, const Matrix& text_batch,
                             const ProjectionPair& proj, const TargetMatrix& target) {
  check_batch(image_batch, text_batch, proj, target);
  const std::size_t b = image_batch.rows();
  const double inv_b = 1.0 / static_cast<double>(b);
  const Forward f = forward(image_batch, text_batch, proj);

  Matrix g_rows(b, b);
  Matrix g_cols(b, b);
  const double image_to_text = soft_cross_entropy(f.logits, target.values, &g_rows);
  const double text_to_image = soft_cross_entropy(
      f.logits.transpose(), row_normalized(target.values.transpose()), &g_cols);

  // d(loss)/d(cosine matrix), combining both directions.
  Matrix g_sim(b, b);
  const double scale = 0.5 * inv_b * proj.logit_scale;
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      g_sim(i, j) = scale * (g_rows(i, j) + g_cols(j, i));
    }
  }

  const Matrix g_img_unit = matmul(g_sim, f.txt.unit);
  const Matrix g_txt_unit = matmul(g_sim.transpose(), f.img.unit);
  const Matrix g_img = unnormalize_grad(g_img_unit, f.img);
  const Matrix g_txt = unnormalize_grad(g_txt_unit, f.txt);

  return {0.5 * (image_to_text + text_to_image) / static_cast<double>(b),
          matmul(g_img.transpose(), image_batch), matmul(g_txt.transpose(), text_batch)};
}

PlateauScheduler::PlateauScheduler(double initial_lr, int patience, double factor)
    : lr_(initial_lr),
      patience_(patience),
      factor_(factor),
      best_(std::numeric_limits<double>::infinity()) {}

double PlateauScheduler::step(double value) {
  if (value < best_) {
    best_ = value;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ > patience_) {
    lr_ *= factor_;
    bad_epochs_ = 0;
  }
  return lr_;
}

AdamW::AdamW(std::size_t rows, std::size_t cols, const TrainConfig& config)
    : m_(rows, cols),
      v_(rows, cols),
      beta1_(config.adam_beta1),
      beta2_(config.adam_beta2),
      epsilon_(config.adam_epsilon),
      weight_decay_(config.weight_decay) {}

void AdamW::step(Matrix& param, const Matrix& grad, double learning_rate) {
  ++t_;
  const double bias1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bias2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  auto p = param.data();
  auto g = grad.data();
  auto m = m_.data();
  auto v = v_.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] -= learning_rate * weight_decay_ * p[i];
    m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
    v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
    const double m_hat = m[i] / bias1;
    const double v_hat = v[i] / bias2;
    p[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + epsilon_);
  }
}

PairedSplit make_pairs(const EmbeddingSet& images, const EmbeddingSet& class_texts) {
  if (images.dim() != class_texts.dim()) {
    throw DimensionError("image dimension " + std::to_string(images.dim()) +
                         " differs from class-text dimension " +
                         std::to_string(class_texts.dim()));
  }
  const auto& labels = images.require_labels();
  PairedSplit out{images.matrix(), Matrix(images.size(), images.dim()), labels};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = class_texts.find(labels[i]);
    if (!row) {
      throw ConfigError("no class-text embedding for label \"" + labels[i] + "\"");
    }
    std::ranges::copy(class_texts.matrix().row(*row), out.texts.row(i).begin());
  }
  return out;
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                   std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

namespace {

std::vector<std::string> gather_labels(const PairedSplit& split,
                                       const std::vector<std::size_t>& idx) {
  std::vector<std::string> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(split.labels[i]);
  return out;
}

}  // namespace

double evaluate_loss(const PairedSplit& split, const ProjectionPair& proj,
                     std::size_t batch_size) {
  std::vector<std::size_t> order(split.size());
  std::iota(order.begin(), order.end(), 0);
  double total = 0.0;
  for (const auto& batch : make_batches(order, batch_size)) {
    const double loss =
        contrastive_loss_value(split.images.select_rows(batch), split.texts.select_rows(batch),
                               proj, build_target_matrix(gather_labels(split, batch)));
    total += loss * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(split.size());
}

TrainResult train_projections(const PairedSplit& train, const PairedSplit& val,
                              const TrainConfig& config) {
  config.validate();
  if (train.size() < 2) throw ConfigError("training split needs at least 2 pairs");
  if (val.size() < 2) throw ConfigError("validation split needs at least 2 pairs");
  const std::size_t d = train.images.cols();
  if (val.images.cols() != d || train.texts.cols() != d || val.texts.cols() != d) {
    throw DimensionError("train/val embedding dimensions disagree");
  }

  Rng rng(config.seed);
  ProjectionPair proj = ProjectionPair::identity(d, config.logit_scale);
  for (Matrix* w : {&proj.w_image, &proj.w_text}) {
    for (double& v : w->data()) v += config.init_noise * rng.normal();
  }

  TrainResult result{proj, {}};
  double lr = config.learning_rate;
  PlateauScheduler scheduler(lr, config.lr_patience, config.lr_factor);

  const double initial_val = evaluate_loss(val, proj, config.batch_size);
  result.log.epochs.push_back(
      {0, evaluate_loss(train, proj, config.batch_size), initial_val, lr});
  result.log.best_val_loss = initial_val;
  scheduler.step(initial_val);

  AdamW opt_image(d, d, config);
  AdamW opt_text(d, d, config);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  int since_best = 0;

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double train_total = 0.0;
    for (const auto& batch : make_batches(order, config.batch_size)) {
      const LossAndGrad lg =
          contrastive_loss(train.images.select_rows(batch), train.texts.select_rows(batch),
                           proj, build_target_matrix(gather_labels(train, batch)));
      train_total += lg.loss * static_cast<double>(batch.size());
      opt_image.step(proj.w_image, lg.grad_w_image, lr);
      opt_text.step(proj.w_text, lg.grad_w_text, lr);
    }
    if (!proj.w_image.all_finite() || !proj.w_text.all_finite()) {
      throw NumericalError("projection weights diverged at epoch " + std::to_string(epoch));
    }
    const double val_loss = evaluate_loss(val, proj, config.batch_size);
    result.log.epochs.push_back(
        {epoch, train_total / static_cast<double>(train.size()), val_loss, lr});

    if (val_loss < result.log.best_val_loss) {
      result.log.best_val_loss = val_loss;
      result.log.best_epoch = epoch;
      result.projections = proj;
      since_best = 0;
    } else if (++since_best >= config.early_stop_patience) {
      break;
    }
    lr = scheduler.step(val_loss);
  }
  return result;
}

void save_checkpoint(const std::filesystem::path& path, const ProjectionPair& proj,
                     const TrainConfig& config, double best_val_loss) {
  proj.validate();
  const std::size_t d = proj.dim();
  Matrix stacked(2 * d, d);
  for (std::size_t r = 0; r < d; ++r) {
    std::ranges::copy(proj.w_image.row(r), stacked.row(r).begin());
    std::ranges::copy(proj.w_text.row(r), stacked.row(d + r).begin());
  }
  write_matrix_container(path, stacked);
  write_json(sidecar_path(path), json{{"d", d},
                                      {"logit_scale", proj.logit_scale},
                                      {"config", to_json(config)},
                                      {"best_val_loss", best_val_loss}});
}

ProjectionPair load_checkpoint(const std::filesystem::path& path) {
  const Matrix stacked = read_matrix_container(path);
  std::ifstream in(sidecar_path(path));
  if (!in) throw FormatError("missing checkpoint sidecar " + sidecar_path(path).string());
  json meta;
  try {
    meta = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(sidecar_path(path).string() + ": " + e.what());
  }
  if (!meta.contains("d") || !meta.at("d").is_number_unsigned() ||
      !meta.contains("logit_scale") || !meta.at("logit_scale").is_number()) {
    throw FormatError(sidecar_path(path).string() + ": needs \"d\" and \"logit_scale\"");
  }
  const auto d = meta.at("d").get<std::size_t>();
  if (stacked.cols() != d || stacked.rows() != 2 * d) {
    throw FormatError(path.string() + ": checkpoint is " + std::to_string(stacked.rows()) +
                      "x" + std::to_string(stacked.cols()) + ", expected " +
                      std::to_string(2 * d) + "x" + std::to_string(d));
  }
  ProjectionPair proj{Matrix(d, d), Matrix(d, d), meta.at("logit_scale").get<double>()};
  for (std::size_t r = 0; r < d; ++r) {
    std::ranges::copy(stacked.row(r), proj.w_image.row(r).begin());
    std::ranges::copy(stacked.row(d + r), proj.w_text.row(r).begin());
  }
  proj.validate();
  return proj;
}

}  // namespace dermcbm
