#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dermcbm/strategy.hpp"

namespace dermcbm {

struct Contribution {
  std::string concept_name;
  double score = 0.0;         // p[k]
  double coefficient = 0.0;   // w[k]
  double contribution = 0.0;  // w[k] * p[k]

  friend bool operator==(const Contribution&, const Contribution&) = default;
};

// Signed per-concept decomposition of a bottleneck score:
// total = intercept + sum of contributions.
struct Explanation {
  std::string image_id;
  std::vector<Contribution> contributions;  // by descending |contribution|
  double intercept = 0.0;
  double total = 0.0;
  double threshold = 0.0;
  int verdict = 0;

  friend bool operator==(const Explanation&, const Explanation&) = default;
};

Explanation explain_prediction(std::span<const double> concept_scores, const MelanomaHead& head,
                               const ConceptSet& concepts, const std::string& image_id);

enum class RenderFormat { kText, kJson, kCsv };

RenderFormat render_format_from_string(const std::string& s);

std::string render_explanation(const Explanation& e, RenderFormat format);

nlohmann::json to_json(const Explanation& e);
Explanation explanation_from_json(const nlohmann::json& j);

}  // namespace dermcbm
