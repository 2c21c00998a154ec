#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dermcbm/experiment.hpp"
#include "dermcbm/rng.hpp"

namespace dermcbm::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& prefix = "dermcbm");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0);
std::vector<double> random_vector(Rng& rng, std::size_t n, double scale = 1.0);
std::vector<double> random_unit(Rng& rng, std::size_t n);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::string read_text(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

// Two-class image/text set: class centroids at a fixed angle in the first two
// coordinates, isotropic Gaussian noise, classes alternating by row. Class
// texts are random unit vectors, so an identity projection starts misaligned.
struct SyntheticSpec {
  std::size_t dim = 16;
  double angle_degrees = 60.0;
  double sigma = 0.1;
  std::size_t n_train = 64;
  std::size_t n_val = 32;
  std::size_t n_test = 64;
  std::uint64_t seed = 7;
};

inline const std::string kPositive = "melanoma";
inline const std::string kNegative = "nevus";

struct SyntheticData {
  Matrix centroids;  // row 0 melanoma, row 1 nevus
  EmbeddingSet train;
  EmbeddingSet val;
  EmbeddingSet test;
  EmbeddingSet class_texts;
  // Two concepts per class, placed near that class centroid, with two
  // descriptors each. Ids follow the concept/descriptor conventions.
  EmbeddingSet concept_texts;
  std::vector<ConceptSpec> concept_specs;
};

SyntheticData make_synthetic(const SyntheticSpec& spec);

struct SyntheticExperiment {
  std::vector<std::string> strategies = {"baseline", "cbm"};
  std::vector<std::uint64_t> seeds = {1};
  std::string projection = "train";
  double learning_rate = 1e-2;
  std::size_t batch_size = 16;
  int max_epochs = 40;
  bool with_concepts = true;
};

// Writes the synthetic data, concept file and config.json into `dir` and
// returns the config path. The output directory is `dir`/out.
std::filesystem::path write_synthetic_experiment(const std::filesystem::path& dir,
                                                 const SyntheticSpec& spec,
                                                 const SyntheticExperiment& exp);

}  // namespace dermcbm::testing
