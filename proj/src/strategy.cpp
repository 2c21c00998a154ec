#include "dermcbm/strategy.hpp"

#include <algorithm>
#include <fstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "dermcbm/errors.hpp"

namespace dermcbm {

namespace {

using json = nlohmann::json;

Matrix single_row(std::span<const double> v) {
  return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
}

void check_dim(std::size_t got, const ProjectionPair& proj, const char* what) {
  if (got != proj.dim()) {
    throw DimensionError(std::string(what) + " dimension " + std::to_string(got) +
                         " does not match projection dimension " +
                         std::to_string(proj.dim()));
  }
}

json parse_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace

ConceptSet::ConceptSet(std::vector<Concept> concepts) : concepts_(std::move(concepts)) {
  if (concepts_.empty()) throw ConfigError("concept set is empty");
  dim_ = concepts_.front().text_embedding.size();
  if (dim_ == 0) throw ConfigError("concept embeddings have dimension 0");
  std::unordered_set<std::string> seen;
  name_embeddings_ = Matrix(concepts_.size(), dim_);
  for (std::size_t k = 0; k < concepts_.size(); ++k) {
    const Concept& c = concepts_[k];
    if (!seen.insert(c.name).second) {
      throw ConfigError("duplicate concept name \"" + c.name + "\"");
    }
    if (c.text_embedding.size() != dim_) {
      throw DimensionError("concept \"" + c.name + "\" has embedding dimension " +
                           std::to_string(c.text_embedding.size()) + ", expected " +
                           std::to_string(dim_));
    }
    if (c.descriptor_embeddings.rows() != c.descriptors.size()) {
      throw ConfigError("concept \"" + c.name + "\" has " +
                        std::to_string(c.descriptors.size()) + " descriptors but " +
                        std::to_string(c.descriptor_embeddings.rows()) +
                        " descriptor embeddings");
    }
    if (!c.descriptors.empty() && c.descriptor_embeddings.cols() != dim_) {
      throw DimensionError("concept \"" + c.name + "\" descriptor embeddings have dimension " +
                           std::to_string(c.descriptor_embeddings.cols()));
    }
    std::ranges::copy(c.text_embedding, name_embeddings_.row(k).begin());
  }
}

std::vector<std::string> ConceptSet::names() const {
  std::vector<std::string> out;
  for (const auto& c : concepts_) out.push_back(c.name);
  return out;
}

std::string concept_id(const std::string& name) { return "concept:" + name; }

std::string descriptor_id(const std::string& name, std::size_t index) {
  return "descriptor:" + name + ":" + std::to_string(index);
}

std::vector<ConceptSpec> read_concept_file(const std::filesystem::path& path) {
  const json j = parse_file(path);
  if (!j.is_object() || !j.contains("concepts") || !j.at("concepts").is_array()) {
    throw FormatError(path.string() + ": expected {\"concepts\": [...]}");
  }
  std::vector<ConceptSpec> specs;
  for (const auto& item : j.at("concepts")) {
    if (!item.is_object() || !item.contains("name") || !item.at("name").is_string()) {
      throw FormatError(path.string() + ": every concept needs a string \"name\"");
    }
    ConceptSpec spec{item.at("name").get<std::string>(), {}};
    if (item.contains("descriptors")) {
      const auto& ds = item.at("descriptors");
      if (!ds.is_array()) {
        throw FormatError(path.string() + ": descriptors of \"" + spec.name +
                          "\" must be an array");
      }
      for (const auto& d : ds) {
        if (!d.is_string()) {
          throw FormatError(path.string() + ": descriptors of \"" + spec.name +
                            "\" must be strings");
        }
        spec.descriptors.push_back(d.get<std::string>());
      }
    }
    specs.push_back(std::move(spec));
  }
  return specs;
}

ConceptSet join_concepts(const std::vector<ConceptSpec>& specs,
                         std::span<const EmbeddingSet* const> sources,
                         bool require_descriptors) {
  auto lookup = [&](const std::string& id) -> std::span<const double> {
    for (const EmbeddingSet* src : sources) {
      if (const auto row = src->find(id)) return src->matrix().row(*row);
    }
    return {};
  };

  std::vector<Concept> concepts;
  for (const auto& spec : specs) {
    const auto name_row = lookup(concept_id(spec.name));
    if (name_row.empty()) {
      throw ConfigError("no embedding with id \"" + concept_id(spec.name) + "\"");
    }
    Concept c{spec.name, spec.descriptors, {name_row.begin(), name_row.end()}, {}};
    std::vector<std::span<const double>> rows;
    for (std::size_t i = 0; i < spec.descriptors.size(); ++i) {
      rows.push_back(lookup(descriptor_id(spec.name, i)));
    }
    const bool none = std::ranges::all_of(rows, [](auto r) { return r.empty(); });
    if (none && !require_descriptors) {
      c.descriptors.clear();
      c.descriptor_embeddings = Matrix(0, c.text_embedding.size());
    } else {
      c.descriptor_embeddings = Matrix(rows.size(), c.text_embedding.size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].empty()) {
          throw ConfigError("no embedding with id \"" + descriptor_id(spec.name, i) + "\"");
        }
        if (rows[i].size() != c.text_embedding.size()) {
          throw DimensionError("descriptor embedding \"" + descriptor_id(spec.name, i) +
                               "\" has a different dimension than its concept");
        }
        std::ranges::copy(rows[i], c.descriptor_embeddings.row(i).begin());
      }
    }
    concepts.push_back(std::move(c));
  }
  return ConceptSet(std::move(concepts));
}

MelanomaHead read_head_file(const std::filesystem::path& path) {
  const json j = parse_file(path);
  if (!j.is_object() || !j.contains("coefficients") || !j.at("coefficients").is_array()) {
    throw FormatError(path.string() + ": head file needs a \"coefficients\" array");
  }
  MelanomaHead head;
  for (const auto& c : j.at("coefficients")) {
    if (!c.is_number()) throw FormatError(path.string() + ": coefficients must be numbers");
    head.coefficients.push_back(c.get<double>());
  }
  if (j.contains("intercept")) head.intercept = j.at("intercept").get<double>();
  if (j.contains("threshold")) head.threshold = j.at("threshold").get<double>();
  return head;
}

void write_head_file(const std::filesystem::path& path, const MelanomaHead& head) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << json{{"coefficients", head.coefficients},
              {"intercept", head.intercept},
              {"threshold", head.threshold}}
             .dump(2)
      << '\n';
}

Matrix batch_class_similarities(const Matrix& images, const Matrix& class_texts,
                                const ProjectionPair& proj) {
  check_dim(images.cols(), proj, "image");
  check_dim(class_texts.cols(), proj, "class text");
  return pairwise_cosine(apply_projection(proj, images, ProjectionSide::kImage),
                         apply_projection(proj, class_texts, ProjectionSide::kText));
}

Matrix batch_concept_scores_cbm(const Matrix& images, const ConceptSet& concepts,
                                const ProjectionPair& proj) {
  check_dim(images.cols(), proj, "image");
  check_dim(concepts.dim(), proj, "concept");
  return pairwise_cosine(apply_projection(proj, images, ProjectionSide::kImage),
                         apply_projection(proj, concepts.name_embeddings(),
                                          ProjectionSide::kText));
}

Matrix batch_concept_scores_gpt(const Matrix& images, const ConceptSet& concepts,
                                const ProjectionPair& proj) {
  check_dim(images.cols(), proj, "image");
  check_dim(concepts.dim(), proj, "concept");
  for (const auto& c : concepts.concepts()) {
    if (c.descriptors.empty()) {
      throw ConfigError("concept \"" + c.name + "\" has no descriptors");
    }
  }
  const Matrix projected = apply_projection(proj, images, ProjectionSide::kImage);
  Matrix out(images.rows(), concepts.size());
  for (std::size_t k = 0; k < concepts.size(); ++k) {
    const Concept& c = concepts.concepts()[k];
    const Matrix sims = pairwise_cosine(
        projected, apply_projection(proj, c.descriptor_embeddings, ProjectionSide::kText));
    const double m = static_cast<double>(c.descriptors.size());
    for (std::size_t i = 0; i < images.rows(); ++i) {
      double sum = 0.0;
      for (double s : sims.row(i)) sum += s;
      out(i, k) = sum / m;
    }
  }
  return out;
}

Prediction predict_baseline(std::span<const double> image, const Matrix& class_texts,
                            const ProjectionPair& proj, const LabelSpace& space) {
  if (class_texts.rows() != space.size()) {
    throw DimensionError("predict_baseline: " + std::to_string(class_texts.rows()) +
                         " class texts for " + std::to_string(space.size()) + " classes");
  }
  const Matrix sims = batch_class_similarities(single_row(image), class_texts, proj);
  Prediction p;
  p.class_scores.assign(sims.row(0).begin(), sims.row(0).end());
  for (std::size_t y = 1; y < p.class_scores.size(); ++y) {
    if (p.class_scores[y] > p.class_scores[p.label]) p.label = y;
  }
  p.score = p.class_scores[p.label];
  p.tie = std::ranges::count(p.class_scores, p.score) > 1;
  return p;
}

std::vector<double> concept_scores_cbm(std::span<const double> image,
                                       const ConceptSet& concepts,
                                       const ProjectionPair& proj) {
  const Matrix scores = batch_concept_scores_cbm(single_row(image), concepts, proj);
  return {scores.row(0).begin(), scores.row(0).end()};
}

std::vector<double> concept_scores_gpt(std::span<const double> image,
                                       const ConceptSet& concepts,
                                       const ProjectionPair& proj) {
  const Matrix scores = batch_concept_scores_gpt(single_row(image), concepts, proj);
  return {scores.row(0).begin(), scores.row(0).end()};
}

Prediction predict_bottleneck(std::span<const double> concept_scores,
                              const MelanomaHead& head) {
  if (concept_scores.size() != head.coefficients.size()) {
    throw DimensionError("predict_bottleneck: " + std::to_string(concept_scores.size()) +
                         " concept scores for " + std::to_string(head.coefficients.size()) +
                         " coefficients");
  }
  Prediction p;
  p.score = dot(head.coefficients, concept_scores) + head.intercept;
  p.label = p.score >= head.threshold ? 1 : 0;
  p.concept_scores.emplace(concept_scores.begin(), concept_scores.end());
  return p;
}

}  // namespace dermcbm
