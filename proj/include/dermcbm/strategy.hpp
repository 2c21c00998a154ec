#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dermcbm/contrastive.hpp"
#include "dermcbm/embed_store.hpp"
#include "dermcbm/numerics.hpp"

namespace dermcbm {

struct Concept {
  std::string name;
  std::vector<std::string> descriptors;
  std::vector<double> text_embedding;
  Matrix descriptor_embeddings;  // one row per descriptor
};

class ConceptSet {
 public:
  explicit ConceptSet(std::vector<Concept> concepts);

  const std::vector<Concept>& concepts() const { return concepts_; }
  std::size_t size() const { return concepts_.size(); }
  std::size_t dim() const { return dim_; }
  std::vector<std::string> names() const;

  // Rows are the concept-name embeddings, in concept order.
  const Matrix& name_embeddings() const { return name_embeddings_; }

 private:
  std::vector<Concept> concepts_;
  Matrix name_embeddings_;
  std::size_t dim_ = 0;
};

// Names and descriptor lists as declared in a concept-set file, before any
// embeddings are attached.
struct ConceptSpec {
  std::string name;
  std::vector<std::string> descriptors;
};

// {"concepts": [{"name": str, "descriptors": [str, ...]}, ...]}
std::vector<ConceptSpec> read_concept_file(const std::filesystem::path& path);

// Join concept specs with embeddings looked up by id: "concept:<name>" and
// "descriptor:<name>:<index>" (index from 0). Every source is searched in
// order. With `require_descriptors` false, concepts whose descriptors are
// absent from every source get an empty descriptor list instead of an error.
ConceptSet join_concepts(const std::vector<ConceptSpec>& specs,
                         std::span<const EmbeddingSet* const> sources,
                         bool require_descriptors);

std::string concept_id(const std::string& name);
std::string descriptor_id(const std::string& name, std::size_t index);

// Linear bottleneck over concept scores: V = coefficients . p + intercept,
// positive iff V >= threshold.
struct MelanomaHead {
  std::vector<double> coefficients;
  double intercept = 0.0;
  double threshold = 0.0;

  friend bool operator==(const MelanomaHead&, const MelanomaHead&) = default;
};

// {"coefficients": [..], "intercept": x, "threshold": t}; a missing intercept
// reads as 0.
MelanomaHead read_head_file(const std::filesystem::path& path);
void write_head_file(const std::filesystem::path& path, const MelanomaHead& head);

struct Prediction {
  double score = 0.0;
  std::size_t label = 0;  // 0/1 for bottleneck strategies, class index for baseline
  std::optional<std::vector<double>> concept_scores;
  // Baseline only: every class similarity, and whether the top score was shared.
  std::vector<double> class_scores;
  bool tie = false;
};

// argmax over classes of cos(W_I x, W_T l_y); ties go to the lowest index.
Prediction predict_baseline(std::span<const double> image, const Matrix& class_texts,
                            const ProjectionPair& proj, const LabelSpace& space);

// p[k] = cos(W_I x, W_T E_C[k]).
std::vector<double> concept_scores_cbm(std::span<const double> image,
                                       const ConceptSet& concepts,
                                       const ProjectionPair& proj);

// p[k] = mean over concept k's descriptors of cos(W_I x, W_T E_s[i]).
std::vector<double> concept_scores_gpt(std::span<const double> image,
                                       const ConceptSet& concepts,
                                       const ProjectionPair& proj);

Prediction predict_bottleneck(std::span<const double> concept_scores,
                              const MelanomaHead& head);

// Batch forms over every row of `images`; rows of the result are samples.
// Texts are projected once per call.
Matrix batch_class_similarities(const Matrix& images, const Matrix& class_texts,
                                const ProjectionPair& proj);
Matrix batch_concept_scores_cbm(const Matrix& images, const ConceptSet& concepts,
                                const ProjectionPair& proj);
Matrix batch_concept_scores_gpt(const Matrix& images, const ConceptSet& concepts,
                                const ProjectionPair& proj);

}  // namespace dermcbm
