#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dermcbm/embed_store.hpp"
#include "dermcbm/numerics.hpp"

namespace dermcbm {

// The two learned d x d maps placed after the frozen image and text encoders.
// A projected row is W * x (so for row-major batches: X * W^T).
struct ProjectionPair {
  Matrix w_image;
  Matrix w_text;
  double logit_scale = 100.0;

  static ProjectionPair identity(std::size_t d, double logit_scale = 100.0);

  std::size_t dim() const { return w_image.rows(); }

  // Throws ConfigError unless both matrices are d x d, finite, logit_scale > 0.
  void validate() const;
};

enum class ProjectionSide { kImage, kText };

// Map every row of `emb` through the selected projection.
Matrix apply_projection(const ProjectionPair& proj, const Matrix& emb, ProjectionSide side);

struct TrainConfig {
  double learning_rate = 1e-5;
  int lr_patience = 1;
  double lr_factor = 0.8;
  std::size_t batch_size = 64;
  int max_epochs = 100;
  // Stop after this many consecutive epochs without a new best val loss.
  int early_stop_patience = 10;
  std::uint64_t seed = 0;
  double weight_decay = 1e-2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double logit_scale = 100.0;
  double init_noise = 1e-3;

  void validate() const;
};

// Soft targets for a batch: entry (i, j) is 1/k_i when labels i and j match
// (k_i = number of batch items sharing label i) and 0 otherwise.
struct TargetMatrix {
  Matrix values;
};

TargetMatrix build_target_matrix(const std::vector<std::string>& batch_labels);

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad_w_image;
  Matrix grad_w_text;
};

// Symmetric soft-label cross-entropy over logits
//   L(i, j) = logit_scale * cos(W_I x_i, W_T l_j),
// averaged over the image->text and text->image directions, with exact
// gradients w.r.t. both projection matrices.
LossAndGrad contrastive_loss(const Matrix& image_batch, const Matrix& text_batch,
                             const ProjectionPair& proj, const TargetMatrix& target);

// Loss only; skips the backward pass.
double contrastive_loss_value(const Matrix& image_batch, const Matrix& text_batch,
                              const ProjectionPair& proj, const TargetMatrix& target);

// Multiplies the learning rate by `factor` once the monitored value has failed
// to improve for more than `patience` consecutive epochs, then resets the
// count. "Improve" means strictly below the best value seen.
class PlateauScheduler {
 public:
  PlateauScheduler(double initial_lr, int patience, double factor);

  // Report one epoch's value; returns the learning rate for the next epoch.
  double step(double value);
  double learning_rate() const { return lr_; }

 private:
  double lr_;
  int patience_;
  double factor_;
  double best_;
  int bad_epochs_ = 0;
};

// Decoupled-weight-decay Adam over a single matrix parameter.
class AdamW {
 public:
  AdamW(std::size_t rows, std::size_t cols, const TrainConfig& config);
  void step(Matrix& param, const Matrix& grad, double learning_rate);

 private:
  Matrix m_;
  Matrix v_;
  double beta1_, beta2_, epsilon_, weight_decay_;
  long t_ = 0;
};

// Image rows paired with the text embedding of each row's class name.
struct PairedSplit {
  Matrix images;
  Matrix texts;
  std::vector<std::string> labels;

  std::size_t size() const { return labels.size(); }
};

// Builds the pairing from image embeddings (labels required) and a class-text
// set whose ids are class names.
PairedSplit make_pairs(const EmbeddingSet& images, const EmbeddingSet& class_texts);

struct EpochRecord {
  int epoch = 0;  // 0 is the untrained initialization
  double train_loss = 0.0;
  double val_loss = 0.0;
  double learning_rate = 0.0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_loss = 0.0;

  friend bool operator==(const TrainLog&, const TrainLog&) = default;
};

struct TrainResult {
  ProjectionPair projections;  // best validation checkpoint
  TrainLog log;
};

// Consecutive chunks of `batch_size`; a trailing chunk of one item is merged
// into the previous chunk because a single pair carries no contrastive signal.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                   std::size_t batch_size);

// Mean per-item loss of `split` evaluated in fixed order with `batch_size`.
double evaluate_loss(const PairedSplit& split, const ProjectionPair& proj,
                     std::size_t batch_size);

TrainResult train_projections(const PairedSplit& train, const PairedSplit& val,
                              const TrainConfig& config);

// Checkpoint: EMB1 container holding w_image rows followed by w_text rows
// (2d x d), plus sidecar {"d", "logit_scale", "config", "best_val_loss"}.
void save_checkpoint(const std::filesystem::path& path, const ProjectionPair& proj,
                     const TrainConfig& config, double best_val_loss);
ProjectionPair load_checkpoint(const std::filesystem::path& path);

}  // namespace dermcbm
