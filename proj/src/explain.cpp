#include "dermcbm/explain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dermcbm/errors.hpp"

namespace dermcbm {

namespace {

constexpr int kBarWidth = 20;

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

std::string bar(double value, double max_abs) {
  const int len = max_abs > 0.0
                      ? static_cast<int>(std::lround(kBarWidth * std::abs(value) / max_abs))
                      : 0;
  const std::string body(static_cast<std::size_t>(len), '#');
  const std::string blank(static_cast<std::size_t>(kBarWidth - len), ' ');
  return value < 0.0 ? blank + body + "|" + std::string(kBarWidth, ' ')
                     : std::string(kBarWidth, ' ') + "|" + body + blank;
}

}  // namespace

Explanation explain_prediction(std::span<const double> concept_scores, const MelanomaHead& head,
                               const ConceptSet& concepts, const std::string& image_id) {
  if (concept_scores.size() != head.coefficients.size() ||
      concept_scores.size() != concepts.size()) {
    throw DimensionError("explain_prediction: " + std::to_string(concept_scores.size()) +
                         " scores, " + std::to_string(head.coefficients.size()) +
                         " coefficients, " + std::to_string(concepts.size()) + " concepts");
  }
  Explanation e;
  e.image_id = image_id;
  e.intercept = head.intercept;
  e.threshold = head.threshold;
  for (std::size_t k = 0; k < concept_scores.size(); ++k) {
    e.contributions.push_back({concepts.concepts()[k].name, concept_scores[k],
                               head.coefficients[k],
                               head.coefficients[k] * concept_scores[k]});
  }
  // Same accumulation order as the bottleneck score itself.
  e.total = dot(head.coefficients, concept_scores) + head.intercept;
  e.verdict = e.total >= head.threshold ? 1 : 0;
  std::ranges::stable_sort(e.contributions, [](const Contribution& a, const Contribution& b) {
    return std::abs(a.contribution) > std::abs(b.contribution);
  });
  return e;
}

RenderFormat render_format_from_string(const std::string& s) {
  if (s == "text") return RenderFormat::kText;
  if (s == "json") return RenderFormat::kJson;
  if (s == "csv") return RenderFormat::kCsv;
  throw ConfigError("unknown explanation format \"" + s + "\" (text, json, csv)");
}

nlohmann::json to_json(const Explanation& e) {
  nlohmann::json contributions = nlohmann::json::array();
  for (const auto& c : e.contributions) {
    contributions.push_back({{"concept", c.concept_name},
                             {"score", c.score},
                             {"coefficient", c.coefficient},
                             {"contribution", c.contribution}});
  }
  return {{"image_id", e.image_id},   {"contributions", contributions},
          {"intercept", e.intercept}, {"total", e.total},
          {"threshold", e.threshold}, {"verdict", e.verdict}};
}

Explanation explanation_from_json(const nlohmann::json& j) {
  try {
    Explanation e;
    e.image_id = j.at("image_id").get<std::string>();
    for (const auto& c : j.at("contributions")) {
      e.contributions.push_back({c.at("concept").get<std::string>(), c.at("score").get<double>(),
                                 c.at("coefficient").get<double>(),
                                 c.at("contribution").get<double>()});
    }
    e.intercept = j.at("intercept").get<double>();
    e.total = j.at("total").get<double>();
    e.threshold = j.at("threshold").get<double>();
    e.verdict = j.at("verdict").get<int>();
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("explanation JSON: ") + ex.what());
  }
}

std::string render_explanation(const Explanation& e, RenderFormat format) {
  switch (format) {
    case RenderFormat::kJson:
      return to_json(e).dump(2) + "\n";
    case RenderFormat::kCsv: {
      std::string out = "concept,score,coefficient,contribution\n";
      for (const auto& c : e.contributions) {
        out += csv_field(c.concept_name) + "," + fmt("%.17g", c.score) + "," +
               fmt("%.17g", c.coefficient) + "," + fmt("%.17g", c.contribution) + "\n";
      }
      return out;
    }
    case RenderFormat::kText:
      break;
  }

  std::size_t width = std::string("(bias)").size();
  double max_abs = std::abs(e.intercept);
  for (const auto& c : e.contributions) {
    width = std::max(width, c.concept_name.size());
    max_abs = std::max(max_abs, std::abs(c.contribution));
  }
  std::string out = "image " + e.image_id + ": " +
                    (e.verdict == 1 ? "melanoma" : "not melanoma") + " (V = " +
                    fmt("%+.6f", e.total) + (e.verdict == 1 ? " >= " : " < ") + "t = " +
                    fmt("%+.6f", e.threshold) + ")\n";
  out += pad("concept", width) + "     score      coef  contribution\n";
  for (const auto& c : e.contributions) {
    out += pad(c.concept_name, width) + fmt(" %9.4f", c.score) + fmt(" %9.4f", c.coefficient) +
           fmt("  %+12.6f", c.contribution) + "  " + bar(c.contribution, max_abs) + "\n";
  }
  out += pad("(bias)", width) + std::string(20, ' ') + fmt("  %+12.6f", e.intercept) + "  " +
         bar(e.intercept, max_abs) + "\n";
  return out;
}

}  // namespace dermcbm
