#include "dermcbm/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <set>
#include <unordered_set>

#include "dermcbm/config_json.hpp"
#include "dermcbm/errors.hpp"

namespace dermcbm {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

// Re-raise a library error with the failing stage prepended, keeping its type
// so the CLI still maps it to the right exit code.
template <typename F>
auto run_stage(const std::string& stage, F&& body) -> decltype(body()) {
  const std::string prefix = "stage " + stage + ": ";
  try {
    return body();
  } catch (const NumericalError& e) {
    throw NumericalError(prefix + e.what());
  } catch (const FormatError& e) {
    throw FormatError(prefix + e.what());
  } catch (const DimensionError& e) {
    throw DimensionError(prefix + e.what());
  } catch (const IoError& e) {
    throw IoError(prefix + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

const json& require(const json& j, const char* key, const char* what) {
  if (!j.contains(key)) {
    throw ConfigError(std::string("missing \"") + key + "\" in " + what);
  }
  return j.at(key);
}

std::string require_string(const json& j, const char* key, const char* what) {
  const json& v = require(j, key, what);
  if (!v.is_string()) throw ConfigError(std::string(what) + "." + key + " must be a string");
  return v.get<std::string>();
}

void check_keys(const json& j, const std::set<std::string>& allowed, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.contains(key)) {
      throw ConfigError("unknown key \"" + key + "\" in " + what);
    }
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

json train_log_json(const TrainLog& log) {
  json epochs = json::array();
  for (const auto& e : log.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"val_loss", e.val_loss},
                      {"learning_rate", e.learning_rate}});
  }
  return {{"epochs", epochs}, {"best_epoch", log.best_epoch},
          {"best_val_loss", log.best_val_loss}};
}

class RunLog {
 public:
  explicit RunLog(const fs::path& path) : out_(path, std::ios::trunc) {}
  void note(const std::string& msg) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%S", std::gmtime(&now));
    out_ << stamp << "Z " << msg << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

std::vector<fs::path> all_embedding_paths(const ExperimentConfig& c) {
  std::vector<fs::path> paths{c.class_texts};
  if (const auto* f = std::get_if<FixedSplits>(&c.splits)) {
    paths.insert(paths.end(), {f->train, f->val, f->test});
  } else {
    paths.push_back(std::get<KFoldSplits>(c.splits).images);
  }
  if (c.needs_concepts()) {
    paths.insert(paths.end(), c.concept_embeddings.begin(), c.concept_embeddings.end());
    if (c.descriptor_embeddings) paths.push_back(*c.descriptor_embeddings);
  }
  return paths;
}

std::vector<const EmbeddingSet*> concept_sources(const std::vector<EmbeddingSet>& sets) {
  std::vector<const EmbeddingSet*> out;
  for (const auto& s : sets) out.push_back(&s);
  return out;
}

bool contains(const std::vector<Strategy>& v, Strategy s) {
  return std::ranges::find(v, s) != v.end();
}

}  // namespace

bool ExperimentConfig::needs_concepts() const {
  return contains(strategies, Strategy::kCbm) || contains(strategies, Strategy::kGptCbm);
}

ExperimentConfig parse_experiment_config(const json& j, const fs::path& base_dir) {
  check_keys(j,
             {"label_space", "class_texts", "concepts", "splits", "kfold", "strategies",
              "projection", "train", "fit", "head", "seeds", "output_dir"},
             "experiment config");
  ExperimentConfig c;

  const json& ls = require(j, "label_space", "experiment config");
  check_keys(ls, {"classes", "positive_class"}, "label_space");
  try {
    c.classes = require(ls, "classes", "label_space").get<std::vector<std::string>>();
  } catch (const json::exception&) {
    throw ConfigError("label_space.classes must be an array of strings");
  }
  c.positive_class = require_string(ls, "positive_class", "label_space");
  c.class_texts = resolve(base_dir, require_string(j, "class_texts", "experiment config"));

  if (j.contains("concepts")) {
    const json& cj = j.at("concepts");
    check_keys(cj, {"file", "embeddings", "descriptor_embeddings"}, "concepts");
    c.concept_file = resolve(base_dir, require_string(cj, "file", "concepts"));
    const json& emb = require(cj, "embeddings", "concepts");
    if (emb.is_string()) {
      c.concept_embeddings.push_back(resolve(base_dir, emb.get<std::string>()));
    } else if (emb.is_array()) {
      for (const auto& e : emb) {
        if (!e.is_string()) throw ConfigError("concepts.embeddings must hold strings");
        c.concept_embeddings.push_back(resolve(base_dir, e.get<std::string>()));
      }
    } else {
      throw ConfigError("concepts.embeddings must be a path or an array of paths");
    }
    if (cj.contains("descriptor_embeddings")) {
      c.descriptor_embeddings =
          resolve(base_dir, require_string(cj, "descriptor_embeddings", "concepts"));
    }
  }

  if (j.contains("splits") == j.contains("kfold")) {
    throw ConfigError("exactly one of \"splits\" and \"kfold\" must be given");
  }
  if (j.contains("splits")) {
    const json& s = j.at("splits");
    check_keys(s, {"train", "val", "test"}, "splits");
    c.splits = FixedSplits{resolve(base_dir, require_string(s, "train", "splits")),
                           resolve(base_dir, require_string(s, "val", "splits")),
                           resolve(base_dir, require_string(s, "test", "splits"))};
  } else {
    const json& s = j.at("kfold");
    check_keys(s, {"images", "k", "inner_val_fraction"}, "kfold");
    KFoldSplits k{resolve(base_dir, require_string(s, "images", "kfold"))};
    if (s.contains("k")) {
      if (!s.at("k").is_number_unsigned()) throw ConfigError("kfold.k must be a positive integer");
      k.k = s.at("k").get<std::size_t>();
    }
    if (s.contains("inner_val_fraction")) {
      if (!s.at("inner_val_fraction").is_number()) {
        throw ConfigError("kfold.inner_val_fraction must be a number");
      }
      k.inner_val_fraction = s.at("inner_val_fraction").get<double>();
    }
    if (k.k < 2) throw ConfigError("kfold.k must be >= 2");
    if (!(k.inner_val_fraction > 0.0 && k.inner_val_fraction < 1.0)) {
      throw ConfigError("kfold.inner_val_fraction must be in (0, 1)");
    }
    c.splits = k;
  }

  const json& strategies = require(j, "strategies", "experiment config");
  if (!strategies.is_array() || strategies.empty()) {
    throw ConfigError("strategies must be a non-empty array");
  }
  for (const auto& s : strategies) {
    if (!s.is_string()) throw ConfigError("strategies must be strings");
    const Strategy st = strategy_from_string(s.get<std::string>());
    if (contains(c.strategies, st)) throw ConfigError("strategy listed twice: " + to_string(st));
    c.strategies.push_back(st);
  }

  if (j.contains("projection")) {
    const json& p = j.at("projection");
    check_keys(p, {"mode", "checkpoint"}, "projection");
    const std::string mode = require_string(p, "mode", "projection");
    if (mode == "train") {
      c.projection = ProjectionMode::kTrain;
    } else if (mode == "identity") {
      c.projection = ProjectionMode::kIdentity;
    } else if (mode == "checkpoint") {
      c.projection = ProjectionMode::kCheckpoint;
      c.checkpoint = resolve(base_dir, require_string(p, "checkpoint", "projection"));
    } else {
      throw ConfigError("projection.mode must be train, identity or checkpoint");
    }
  }
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("fit")) c.fit = fit_config_from_json(j.at("fit"));
  if (j.contains("head")) {
    const json& h = j.at("head");
    check_keys(h, {"file", "tune_threshold"}, "head");
    if (h.contains("file")) c.head_file = resolve(base_dir, require_string(h, "file", "head"));
    if (h.contains("tune_threshold")) {
      if (!h.at("tune_threshold").is_boolean()) {
        throw ConfigError("head.tune_threshold must be a boolean");
      }
      c.tune_head_threshold = h.at("tune_threshold").get<bool>();
    }
  }

  const json& seeds = require(j, "seeds", "experiment config");
  if (!seeds.is_array() || seeds.empty()) throw ConfigError("seeds must be a non-empty array");
  for (const auto& s : seeds) {
    if (!s.is_number_unsigned()) throw ConfigError("seeds must be non-negative integers");
    c.seeds.push_back(s.get<std::uint64_t>());
  }
  c.output_dir = resolve(base_dir, require_string(j, "output_dir", "experiment config"));
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_experiment_config(j, path.parent_path());
}

std::vector<std::string> validate_config(const ExperimentConfig& c) {
  std::vector<std::string> findings;
  auto find = [&](std::string msg) { findings.push_back(std::move(msg)); };

  // Label space.
  std::optional<LabelSpace> space;
  try {
    space.emplace(c.classes, c.positive_class);
  } catch (const Error& e) {
    find(std::string("label space: ") + e.what());
  }
  if (c.seeds.empty()) find("no seeds given");
  if (c.needs_concepts() && !c.concept_file) {
    find("strategies cbm/gpt_cbm need a concept file (\"concepts\")");
  }
  if (c.projection == ProjectionMode::kCheckpoint && !c.checkpoint) {
    find("projection mode checkpoint without a checkpoint path");
  }

  // Embedding files: existence, loadability, one shared dimension.
  std::map<fs::path, EmbeddingSet> loaded;
  std::optional<std::pair<fs::path, std::size_t>> reference;
  for (const auto& path : all_embedding_paths(c)) {
    if (loaded.contains(path)) continue;
    if (!fs::exists(path)) {
      find("missing file " + path.string());
      continue;
    }
    try {
      auto set = load_embeddings(path);
      if (!reference) {
        reference.emplace(path, set.dim());
      } else if (set.dim() != reference->second) {
        find("dimension mismatch: " + reference->first.string() + " has d=" +
             std::to_string(reference->second) + " but " + path.string() + " has d=" +
             std::to_string(set.dim()));
      }
      loaded.emplace(path, std::move(set));
    } catch (const Error& e) {
      find("cannot load " + path.string() + ": " + e.what());
    }
  }

  if (space) {
    if (const auto it = loaded.find(c.class_texts); it != loaded.end()) {
      for (const auto& cls : space->classes()) {
        if (!it->second.find(cls)) {
          find("class text file " + c.class_texts.string() + " has no row for class \"" + cls +
               "\"");
        }
      }
    }
    std::vector<fs::path> image_paths;
    if (const auto* f = std::get_if<FixedSplits>(&c.splits)) {
      image_paths = {f->train, f->val, f->test};
    } else {
      image_paths = {std::get<KFoldSplits>(c.splits).images};
    }
    for (const auto& path : image_paths) {
      const auto it = loaded.find(path);
      if (it == loaded.end()) continue;
      const auto& labels = it->second.labels();
      if (!labels) {
        find("image file " + path.string() + " has no labels");
        continue;
      }
      std::set<std::string> unknown;
      std::map<std::string, std::size_t> counts;
      for (const auto& l : *labels) {
        if (!space->find(l)) unknown.insert(l);
        ++counts[l];
      }
      for (const auto& u : unknown) {
        find("image file " + path.string() + " uses label \"" + u + "\" not in the label space");
      }
      const std::size_t pos = counts[space->positive_class()];
      if (pos == 0 || pos == labels->size()) {
        find("image file " + path.string() + " does not contain both melanoma and non-melanoma");
      }
      if (const auto* k = std::get_if<KFoldSplits>(&c.splits)) {
        for (const auto& [cls, n] : counts) {
          if (n < k->k) {
            find("class \"" + cls + "\" has " + std::to_string(n) + " images, fewer than k=" +
                 std::to_string(k->k));
          }
        }
      }
    }
  }

  // Concepts: file contents and joined ids.
  std::optional<std::size_t> n_concepts;
  if (c.needs_concepts() && c.concept_file) {
    if (!fs::exists(*c.concept_file)) {
      find("missing file " + c.concept_file->string());
    } else {
      try {
        const auto specs = read_concept_file(*c.concept_file);
        n_concepts = specs.size();
        if (specs.empty()) find("concept file " + c.concept_file->string() + " lists no concepts");
        std::unordered_set<std::string> names;
        for (const auto& s : specs) {
          if (!names.insert(s.name).second) {
            find("concept file " + c.concept_file->string() + " repeats concept \"" + s.name +
                 "\"");
          }
        }
        auto has_id = [&](const std::string& id, const std::vector<fs::path>& paths) {
          return std::ranges::any_of(paths, [&](const fs::path& p) {
            const auto it = loaded.find(p);
            return it != loaded.end() && it->second.find(id).has_value();
          });
        };
        std::vector<fs::path> desc_paths = c.concept_embeddings;
        if (c.descriptor_embeddings) desc_paths.push_back(*c.descriptor_embeddings);
        const bool need_desc = contains(c.strategies, Strategy::kGptCbm);
        for (const auto& s : specs) {
          if (!has_id(concept_id(s.name), c.concept_embeddings)) {
            find("no embedding with id \"" + concept_id(s.name) + "\"");
          }
          if (!need_desc) continue;
          if (s.descriptors.empty()) find("concept \"" + s.name + "\" has no descriptors");
          for (std::size_t i = 0; i < s.descriptors.size(); ++i) {
            if (!has_id(descriptor_id(s.name, i), desc_paths)) {
              find("no embedding with id \"" + descriptor_id(s.name, i) + "\"");
            }
          }
        }
      } catch (const Error& e) {
        find(std::string("concept file: ") + e.what());
      }
    }
  }

  if (c.head_file) {
    if (!fs::exists(*c.head_file)) {
      find("missing file " + c.head_file->string());
    } else {
      try {
        const auto head = read_head_file(*c.head_file);
        if (n_concepts && head.coefficients.size() != *n_concepts) {
          find("head file " + c.head_file->string() + " has " +
               std::to_string(head.coefficients.size()) + " coefficients for " +
               std::to_string(*n_concepts) + " concepts");
        }
      } catch (const Error& e) {
        find(std::string("head file: ") + e.what());
      }
    }
  }

  if (c.projection == ProjectionMode::kCheckpoint && c.checkpoint) {
    if (!fs::exists(*c.checkpoint)) {
      find("missing file " + c.checkpoint->string());
    } else {
      try {
        const auto proj = load_checkpoint(*c.checkpoint);
        if (reference && proj.dim() != reference->second) {
          find("checkpoint " + c.checkpoint->string() + " has d=" + std::to_string(proj.dim()) +
               " but embeddings have d=" + std::to_string(reference->second));
        }
      } catch (const Error& e) {
        find(std::string("checkpoint: ") + e.what());
      }
    }
  }
  return findings;
}

std::vector<std::size_t> class_indices(const EmbeddingSet& set, const LabelSpace& space) {
  std::vector<std::size_t> out;
  for (const auto& l : set.require_labels()) out.push_back(space.index_of(l));
  return out;
}

std::vector<int> melanoma_truth(const EmbeddingSet& set, const LabelSpace& space) {
  return multiclass_to_binary(class_indices(set, space), space);
}

ExperimentData load_experiment_data(const ExperimentConfig& c) {
  return run_stage("load", [&] {
    LabelSpace space(c.classes, c.positive_class);
    EmbeddingSet class_texts = load_embeddings(c.class_texts);
    Matrix class_matrix(space.size(), class_texts.dim());
    for (std::size_t y = 0; y < space.size(); ++y) {
      const auto row = class_texts.find(space.classes()[y]);
      if (!row) {
        throw ConfigError("class text file has no row for class \"" + space.classes()[y] + "\"");
      }
      std::ranges::copy(class_texts.matrix().row(*row), class_matrix.row(y).begin());
    }
    ExperimentData data{std::move(space), std::move(class_texts), std::move(class_matrix),
                        std::nullopt, std::nullopt, std::nullopt, std::nullopt, std::nullopt,
                        std::nullopt};
    const std::size_t d = data.class_texts.dim();
    auto load_images = [&](const fs::path& p) {
      EmbeddingSet s = load_embeddings(p);
      if (s.dim() != d) {
        throw DimensionError(p.string() + " has d=" + std::to_string(s.dim()) + " but " +
                             c.class_texts.string() + " has d=" + std::to_string(d));
      }
      class_indices(s, data.space);  // every label must be known
      return s;
    };
    if (const auto* f = std::get_if<FixedSplits>(&c.splits)) {
      data.train = load_images(f->train);
      data.val = load_images(f->val);
      data.test = load_images(f->test);
    } else {
      data.all_images = load_images(std::get<KFoldSplits>(c.splits).images);
    }

    if (c.needs_concepts()) {
      if (!c.concept_file) throw ConfigError("cbm/gpt_cbm requested without a concept file");
      std::vector<EmbeddingSet> sources;
      for (const auto& p : c.concept_embeddings) sources.push_back(load_embeddings(p));
      if (c.descriptor_embeddings) sources.push_back(load_embeddings(*c.descriptor_embeddings));
      const auto ptrs = concept_sources(sources);
      data.concepts = join_concepts(read_concept_file(*c.concept_file), ptrs,
                                    contains(c.strategies, Strategy::kGptCbm));
      if (data.concepts->dim() != d) {
        throw DimensionError("concept embeddings have d=" + std::to_string(data.concepts->dim()) +
                             " but images have d=" + std::to_string(d));
      }
      if (c.head_file) {
        data.head_file = read_head_file(*c.head_file);
        if (data.head_file->coefficients.size() != data.concepts->size()) {
          throw ConfigError("head file has " +
                            std::to_string(data.head_file->coefficients.size()) +
                            " coefficients for " + std::to_string(data.concepts->size()) +
                            " concepts");
        }
      }
    }
    return data;
  });
}

std::vector<SplitSet> splits_for_seed(const ExperimentConfig& c, const ExperimentData& data,
                                      std::uint64_t seed) {
  if (data.train) return {SplitSet{*data.train, *data.val, *data.test, "fixed"}};
  const auto& kf = std::get<KFoldSplits>(c.splits);
  const EmbeddingSet& all = *data.all_images;
  std::vector<SplitSet> out;
  const auto folds = stratified_kfold(all.require_labels(), kf.k, seed);
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const EmbeddingSet pool = all.subset(folds[f].train);
    const auto [kept, held] = stratified_holdout(pool.require_labels(), kf.inner_val_fraction,
                                                 seed + 1000003 * (f + 1));
    out.push_back(SplitSet{pool.subset(kept), pool.subset(held), all.subset(folds[f].test),
                           "fold" + std::to_string(f)});
  }
  return out;
}

ProjectionPair obtain_projections(const ExperimentConfig& c, const ExperimentData& data,
                                  const SplitSet& split, std::uint64_t seed,
                                  std::optional<TrainLog>* log) {
  switch (c.projection) {
    case ProjectionMode::kIdentity:
      return ProjectionPair::identity(data.class_texts.dim(), c.train.logit_scale);
    case ProjectionMode::kCheckpoint: {
      ProjectionPair p = load_checkpoint(*c.checkpoint);
      if (p.dim() != data.class_texts.dim()) {
        throw DimensionError("checkpoint dimension " + std::to_string(p.dim()) +
                             " does not match embeddings");
      }
      return p;
    }
    case ProjectionMode::kTrain:
      break;
  }
  TrainConfig tc = c.train;
  tc.seed = seed;
  TrainResult r = train_projections(make_pairs(split.train, data.class_texts),
                                    make_pairs(split.val, data.class_texts), tc);
  if (log != nullptr) *log = r.log;
  return r.projections;
}

MelanomaHead obtain_head(const ExperimentConfig& c, const ExperimentData& data,
                         const Matrix& train_scores, std::span<const int> train_truth,
                         const Matrix& val_scores, std::span<const int> val_truth) {
  if (data.head_file) {
    MelanomaHead head = *data.head_file;
    if (c.tune_head_threshold) {
      head.threshold = tune_threshold(bottleneck_scores(val_scores, head), val_truth).threshold;
    }
    return head;
  }
  return fit_head_from_concepts(train_scores, train_truth, val_scores, val_truth, c.fit);
}

Matrix concept_scores_for(Strategy strategy, const Matrix& images, const ConceptSet& concepts,
                          const ProjectionPair& proj) {
  return strategy == Strategy::kGptCbm ? batch_concept_scores_gpt(images, concepts, proj)
                                       : batch_concept_scores_cbm(images, concepts, proj);
}

SplitOutcome evaluate_split(const ExperimentConfig& c, const ExperimentData& data,
                            const SplitSet& split, std::uint64_t seed,
                            const std::vector<Strategy>& strategies) {
  SplitOutcome out;
  out.projections = run_stage("train-proj", [&] {
    return obtain_projections(c, data, split, seed, &out.train_log);
  });
  const LabelSpace& space = data.space;
  out.test_truth = melanoma_truth(split.test, space);
  const std::vector<int> train_truth = melanoma_truth(split.train, space);
  const std::vector<int> val_truth = melanoma_truth(split.val, space);
  const std::size_t n_pos =
      static_cast<std::size_t>(std::ranges::count(out.test_truth, 1));

  auto base_report = [&](Strategy s) {
    EvalReport r;
    r.strategy = s;
    r.n_pos = n_pos;
    r.n_neg = out.test_truth.size() - n_pos;
    r.split_tag = split.tag;
    r.run_seed = static_cast<std::int64_t>(seed);
    return r;
  };
  auto finish = [&](EvalReport& r, const std::vector<int>& pred, std::vector<double> scores) {
    r.bacc = balanced_accuracy(pred, out.test_truth);
    const RocResult roc = roc_auc(scores, out.test_truth);
    r.auc = roc.auc;
    r.roc_points = roc.points;
    out.test_scores[r.strategy] = std::move(scores);
    out.reports.push_back(r);
  };

  for (Strategy s : strategies) {
    run_stage(to_string(s), [&] {
      EvalReport r = base_report(s);
      switch (s) {
        case Strategy::kBaseline: {
          const Matrix sims =
              batch_class_similarities(split.test.matrix(), data.class_text_matrix,
                                       out.projections);
          std::vector<std::size_t> pred(sims.rows());
          std::vector<double> margin(sims.rows());
          const std::size_t pos = space.positive_index();
          for (std::size_t i = 0; i < sims.rows(); ++i) {
            const auto row = sims.row(i);
            for (std::size_t y = 1; y < row.size(); ++y) {
              if (row[y] > row[pred[i]]) pred[i] = y;
            }
            double best_other = -2.0;
            for (std::size_t y = 0; y < row.size(); ++y) {
              if (y != pos) best_other = std::max(best_other, row[y]);
            }
            margin[i] = row[pos] - best_other;
          }
          if (space.size() > 2) {
            r.bacc_multiclass = balanced_accuracy_multiclass(
                pred, class_indices(split.test, space), space.size());
          }
          finish(r, multiclass_to_binary(pred, space), std::move(margin));
          break;
        }
        case Strategy::kCbm:
        case Strategy::kGptCbm: {
          const ConceptSet& concepts = *data.concepts;
          const Matrix train_p =
              concept_scores_for(s, split.train.matrix(), concepts, out.projections);
          const Matrix val_p = concept_scores_for(s, split.val.matrix(), concepts, out.projections);
          const Matrix test_p =
              concept_scores_for(s, split.test.matrix(), concepts, out.projections);
          const MelanomaHead head =
              run_stage("fit-head", [&] {
                return obtain_head(c, data, train_p, train_truth, val_p, val_truth);
              });
          std::vector<int> pred(test_p.rows());
          std::vector<double> v(test_p.rows());
          for (std::size_t i = 0; i < test_p.rows(); ++i) {
            const Prediction p = predict_bottleneck(test_p.row(i), head);
            pred[i] = static_cast<int>(p.label);
            v[i] = p.score;
          }
          out.heads[s] = head;
          finish(r, pred, std::move(v));
          break;
        }
        case Strategy::kLinearProbe: {
          const LogisticModel model = fit_logistic(
              split.train.matrix(), class_indices(split.train, space), space.size(), c.fit);
          const std::vector<std::size_t> pred = model.predict(split.test.matrix());
          if (space.size() > 2) {
            r.bacc_multiclass = balanced_accuracy_multiclass(
                pred, class_indices(split.test, space), space.size());
          }
          out.probe = model;
          finish(r, multiclass_to_binary(pred, space),
                 model.positive_probability(split.test.matrix(), space.positive_index()));
          break;
        }
      }
    });
  }
  return out;
}

std::string sanitize_id(const std::string& id) {
  std::string out = id;
  for (char& ch : out) {
    const bool ok = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') ||
                    (ch >= '0' && ch <= '9') || ch == '.' || ch == '-' || ch == '_';
    if (!ok) ch = '_';
  }
  if (out.empty() || out == "." || out == "..") out = "_" + out;
  return out;
}

ExperimentResult run_experiment(const ExperimentConfig& c) {
  if (c.seeds.empty()) throw ConfigError("no seeds given");
  const ExperimentData data = load_experiment_data(c);
  run_stage("output", [&] {
    fs::create_directories(c.output_dir / "checkpoints");
    fs::create_directories(c.output_dir / "explanations");
  });
  RunLog log(c.output_dir / "run.log");
  log.note("experiment start");

  const bool kfold = std::holds_alternative<KFoldSplits>(c.splits);
  ExperimentResult result;
  json folds_json = json::array();
  std::map<Strategy, std::vector<RocPoint>> first_roc;

  for (std::size_t s_idx = 0; s_idx < c.seeds.size(); ++s_idx) {
    const std::uint64_t seed = c.seeds[s_idx];
    log.note("seed " + std::to_string(seed));
    const auto splits = run_stage("split", [&] { return splits_for_seed(c, data, seed); });

    // Per strategy: fold reports plus pooled out-of-fold scores.
    std::map<Strategy, std::vector<EvalReport>> per_split;
    std::map<Strategy, std::vector<double>> pooled_scores;
    std::vector<int> pooled_truth;

    for (const SplitSet& split : splits) {
      SplitOutcome outcome = evaluate_split(c, data, split, seed, c.strategies);
      const std::string suffix =
          "seed" + std::to_string(seed) + (kfold ? "_" + split.tag : std::string());
      run_stage("write-artifacts", [&] {
        if (c.projection == ProjectionMode::kTrain && outcome.train_log) {
          save_checkpoint(c.output_dir / "checkpoints" / ("proj_" + suffix + ".emb"),
                          outcome.projections, c.train, outcome.train_log->best_val_loss);
          write_text(c.output_dir / "checkpoints" / ("train_log_" + suffix + ".json"),
                     train_log_json(*outcome.train_log).dump(2) + "\n");
        }
        for (const auto& [strategy, head] : outcome.heads) {
          write_head_file(
              c.output_dir / "checkpoints" / ("head_" + to_string(strategy) + "_" + suffix + ".json"),
              head);
        }
        // Concept explanations for the first seed only, so files never collide.
        if (s_idx == 0 && data.concepts) {
          const Strategy explained =
              outcome.heads.contains(Strategy::kCbm) ? Strategy::kCbm : Strategy::kGptCbm;
          if (outcome.heads.contains(explained)) {
            const Matrix p = concept_scores_for(explained, split.test.matrix(), *data.concepts,
                                                outcome.projections);
            for (std::size_t i = 0; i < split.test.size(); ++i) {
              const Explanation e = explain_prediction(p.row(i), outcome.heads.at(explained),
                                                       *data.concepts, split.test.ids()[i]);
              write_text(c.output_dir / "explanations" / (sanitize_id(e.image_id) + ".csv"),
                         render_explanation(e, RenderFormat::kCsv));
            }
          }
        }
      });
      for (const auto& r : outcome.reports) {
        per_split[r.strategy].push_back(r);
        if (kfold) folds_json.push_back(to_json(r));
      }
      for (auto& [strategy, scores] : outcome.test_scores) {
        auto& pool = pooled_scores[strategy];
        pool.insert(pool.end(), scores.begin(), scores.end());
      }
      pooled_truth.insert(pooled_truth.end(), outcome.test_truth.begin(),
                          outcome.test_truth.end());
      log.note("seed " + std::to_string(seed) + " " + split.tag + " done");
    }

    for (Strategy strategy : c.strategies) {
      const auto& reports = per_split.at(strategy);
      EvalReport row;
      if (!kfold) {
        row = reports.front();
      } else {
        row.strategy = strategy;
        row.run_seed = static_cast<std::int64_t>(seed);
        row.split_tag = "kfold" + std::to_string(splits.size());
        std::vector<double> baccs, aucs, multi;
        for (const auto& r : reports) {
          baccs.push_back(r.bacc);
          aucs.push_back(*r.auc);
          if (r.bacc_multiclass) multi.push_back(*r.bacc_multiclass);
          row.n_pos += r.n_pos;
          row.n_neg += r.n_neg;
        }
        row.bacc = mean_std(baccs).mean;
        row.auc = mean_std(aucs).mean;
        if (!multi.empty()) row.bacc_multiclass = mean_std(multi).mean;
        row.roc_points = roc_auc(pooled_scores.at(strategy), pooled_truth).points;
      }
      if (s_idx == 0) first_roc[strategy] = row.roc_points;
      result.runs.push_back(std::move(row));
    }
  }

  json runs = json::array();
  for (const auto& r : result.runs) runs.push_back(to_json(r));
  json aggregate = json::array();
  for (Strategy strategy : c.strategies) {
    std::vector<double> baccs, aucs, multi;
    for (const auto& r : result.runs) {
      if (r.strategy != strategy) continue;
      baccs.push_back(r.bacc);
      if (r.auc) aucs.push_back(*r.auc);
      if (r.bacc_multiclass) multi.push_back(*r.bacc_multiclass);
    }
    const MeanStd b = mean_std(baccs);
    const MeanStd a = mean_std(aucs);
    json row{{"strategy", to_string(strategy)}, {"n_runs", baccs.size()},
             {"bacc_mean", b.mean},             {"bacc_std", b.std},
             {"auc_mean", a.mean},              {"auc_std", a.std}};
    if (!multi.empty()) {
      const MeanStd m = mean_std(multi);
      row["bacc_multiclass_mean"] = m.mean;
      row["bacc_multiclass_std"] = m.std;
    }
    aggregate.push_back(row);
  }
  result.report = json{{"runs", runs}, {"aggregate", aggregate}};
  if (kfold) result.report["folds"] = folds_json;

  run_stage("write-report", [&] {
    write_text(c.output_dir / "report.json", result.report.dump(2) + "\n");
    for (const auto& [strategy, points] : first_roc) {
      write_text(c.output_dir / ("roc_" + to_string(strategy) + ".csv"), roc_csv(points));
    }
  });
  log.note("experiment done");
  return result;
}

std::vector<SweepRow> run_size_sweep(const ExperimentConfig& c,
                                     const std::vector<std::size_t>& sizes) {
  if (!std::holds_alternative<FixedSplits>(c.splits)) {
    throw ConfigError("sweep-size needs fixed train/val/test splits");
  }
  if (!c.concept_file) throw ConfigError("sweep-size evaluates CBM and needs a concept file");
  if (sizes.empty()) throw ConfigError("sweep-size needs at least one size");
  if (!std::ranges::is_sorted(sizes)) throw ConfigError("sweep sizes must be ascending");
  if (c.seeds.empty()) throw ConfigError("no seeds given");

  ExperimentConfig cbm_config = c;
  if (!contains(cbm_config.strategies, Strategy::kCbm)) {
    cbm_config.strategies.push_back(Strategy::kCbm);
  }
  const ExperimentData data = load_experiment_data(cbm_config);
  const EmbeddingSet& train = *data.train;
  for (std::size_t n : sizes) {
    if (n > train.size()) {
      throw ConfigError("sweep size " + std::to_string(n) + " exceeds the train split (" +
                        std::to_string(train.size()) + ")");
    }
  }

  std::vector<SweepRow> rows;
  for (std::size_t n : sizes) {
    SweepRow row{n, 0.0, 0.0, {}};
    for (std::uint64_t seed : c.seeds) {
      const auto picked = run_stage("subsample", [&] {
        return stratified_subsample(train.require_labels(), n, seed);
      });
      const SplitSet split{train.subset(picked), *data.val, *data.test, "size" + std::to_string(n)};
      const SplitOutcome outcome = evaluate_split(cbm_config, data, split, seed, {Strategy::kCbm});
      row.aucs.push_back(*outcome.reports.front().auc);
    }
    const MeanStd ms = mean_std(row.aucs);
    row.auc_mean = ms.mean;
    row.auc_std = ms.std;
    rows.push_back(std::move(row));
  }
  run_stage("write-report", [&] {
    fs::create_directories(c.output_dir);
    write_text(c.output_dir / "sweep.csv", sweep_csv(rows));
  });
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "size,auc_mean,auc_std\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", r.size, r.auc_mean, r.auc_std);
    out += buf;
  }
  return out;
}

}  // namespace dermcbm
