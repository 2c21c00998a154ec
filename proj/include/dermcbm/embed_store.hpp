#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dermcbm/numerics.hpp"

namespace dermcbm {

// N x d encoder outputs with per-row identifiers and optional class labels.
// Immutable once constructed; the constructor enforces the invariants.
class EmbeddingSet {
 public:
  EmbeddingSet(std::vector<std::string> ids, Matrix matrix,
               std::optional<std::vector<std::string>> labels = std::nullopt,
               std::string encoder_tag = {});

  const std::vector<std::string>& ids() const { return ids_; }
  const std::optional<std::vector<std::string>>& labels() const { return labels_; }
  const Matrix& matrix() const { return matrix_; }
  const std::string& encoder_tag() const { return encoder_tag_; }

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return matrix_.cols(); }

  // Row index for an id, or nullopt.
  std::optional<std::size_t> find(const std::string& id) const;

  // Labels, or a ConfigError when the set carries none.
  const std::vector<std::string>& require_labels() const;

  // New set restricted to the given rows (ids, labels, tag carried along).
  EmbeddingSet subset(std::span<const std::size_t> rows) const;

 private:
  std::vector<std::string> ids_;
  std::optional<std::vector<std::string>> labels_;
  Matrix matrix_;
  std::string encoder_tag_;
};

// Ordered class names plus which one counts as melanoma.
class LabelSpace {
 public:
  LabelSpace(std::vector<std::string> classes, std::string positive_class);

  const std::vector<std::string>& classes() const { return classes_; }
  const std::string& positive_class() const { return positive_class_; }
  std::size_t positive_index() const { return positive_index_; }
  std::size_t size() const { return classes_.size(); }

  // Index of a class name; ConfigError for an unknown name.
  std::size_t index_of(const std::string& name) const;
  std::optional<std::size_t> find(const std::string& name) const;

 private:
  std::vector<std::string> classes_;
  std::string positive_class_;
  std::size_t positive_index_ = 0;
};

// EMB1 container: "EMB1", u32 version=1, u32 N, u32 d, then N*d float32,
// all little-endian, nothing after the payload.
inline constexpr std::uint32_t kEmb1Version = 1;
inline constexpr std::size_t kEmb1HeaderBytes = 16;

Matrix read_matrix_container(const std::filesystem::path& path);
void write_matrix_container(const std::filesystem::path& path, const Matrix& m);

// Same as the file variants but over an in-memory byte image.
Matrix decode_matrix_container(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_matrix_container(const Matrix& m);

// Path of the JSON metadata sidecar: "<path>.meta.json".
std::filesystem::path sidecar_path(const std::filesystem::path& path);

EmbeddingSet load_embeddings(const std::filesystem::path& path);
void save_embeddings(const EmbeddingSet& set, const std::filesystem::path& path);

}  // namespace dermcbm
