#include "support.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <stdexcept>

#include <unistd.h>

namespace dermcbm::testing {

namespace fs = std::filesystem;
using json = nlohmann::json;

TempDir::TempDir(const std::string& prefix) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          (prefix + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  }
  return m;
}

std::vector<double> random_vector(Rng& rng, std::size_t n, double scale) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

std::vector<double> random_unit(Rng& rng, std::size_t n) {
  std::vector<double> v = random_vector(rng, n);
  double s = 0.0;
  for (double x : v) s += x * x;
  s = std::sqrt(s);
  for (double& x : v) x /= s;
  return v;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

std::string read_text(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return {bytes.begin(), bytes.end()};
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
}

namespace {

EmbeddingSet make_images(Rng& rng, const Matrix& centroids, double sigma, std::size_t n,
                         const std::string& prefix) {
  const std::size_t d = centroids.cols();
  Matrix m(n, d);
  std::vector<std::string> ids, labels;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i % 2;
    for (std::size_t j = 0; j < d; ++j) m(i, j) = centroids(y, j) + sigma * rng.normal();
    ids.push_back(prefix + std::to_string(i));
    labels.push_back(y == 0 ? kPositive : kNegative);
  }
  return EmbeddingSet(std::move(ids), std::move(m), std::move(labels), "synthetic");
}

}  // namespace

SyntheticData make_synthetic(const SyntheticSpec& spec) {
  Rng rng(spec.seed);
  const std::size_t d = spec.dim;
  const double a = spec.angle_degrees * std::numbers::pi / 180.0;
  Matrix centroids(2, d);
  centroids(0, 0) = 1.0;
  centroids(1, 0) = std::cos(a);
  centroids(1, 1) = std::sin(a);

  EmbeddingSet train = make_images(rng, centroids, spec.sigma, spec.n_train, "train_");
  EmbeddingSet val = make_images(rng, centroids, spec.sigma, spec.n_val, "val_");
  EmbeddingSet test = make_images(rng, centroids, spec.sigma, spec.n_test, "test_");

  Matrix texts(2, d);
  for (std::size_t y = 0; y < 2; ++y) {
    const auto u = random_unit(rng, d);
    std::ranges::copy(u, texts.row(y).begin());
  }
  EmbeddingSet class_texts({kPositive, kNegative}, texts, std::nullopt, "synthetic");

  const std::vector<std::pair<std::string, std::size_t>> concepts = {
      {"atypical network", 0}, {"blue-whitish veil", 0}, {"regular network", 1},
      {"symmetric shape", 1}};
  std::vector<ConceptSpec> specs;
  std::vector<std::string> ids;
  std::vector<std::vector<double>> rows;
  auto near = [&](std::size_t y, double spread) {
    std::vector<double> v(d);
    for (std::size_t j = 0; j < d; ++j) v[j] = centroids(y, j) + spread * rng.normal();
    return v;
  };
  for (const auto& [name, y] : concepts) {
    specs.push_back({name, {name + " seen up close", name + " in the periphery"}});
    ids.push_back(concept_id(name));
    rows.push_back(near(y, 0.1));
    for (std::size_t i = 0; i < 2; ++i) {
      ids.push_back(descriptor_id(name, i));
      rows.push_back(near(y, 0.15));
    }
  }
  Matrix cm(rows.size(), d);
  for (std::size_t r = 0; r < rows.size(); ++r) std::ranges::copy(rows[r], cm.row(r).begin());
  EmbeddingSet concept_texts(std::move(ids), std::move(cm), std::nullopt, "synthetic");

  return SyntheticData{std::move(centroids), std::move(train), std::move(val),
                       std::move(test),      std::move(class_texts), std::move(concept_texts),
                       std::move(specs)};
}

fs::path write_synthetic_experiment(const fs::path& dir, const SyntheticSpec& spec,
                                    const SyntheticExperiment& exp) {
  fs::create_directories(dir);
  const SyntheticData data = make_synthetic(spec);
  save_embeddings(data.train, dir / "train.emb");
  save_embeddings(data.val, dir / "val.emb");
  save_embeddings(data.test, dir / "test.emb");
  save_embeddings(data.class_texts, dir / "class_texts.emb");

  json config{
      {"label_space", {{"classes", {kPositive, kNegative}}, {"positive_class", kPositive}}},
      {"class_texts", "class_texts.emb"},
      {"splits", {{"train", "train.emb"}, {"val", "val.emb"}, {"test", "test.emb"}}},
      {"strategies", exp.strategies},
      {"projection", {{"mode", exp.projection}}},
      {"train",
       {{"learning_rate", exp.learning_rate},
        {"batch_size", exp.batch_size},
        {"max_epochs", exp.max_epochs}}},
      {"seeds", exp.seeds},
      {"output_dir", "out"}};
  if (exp.with_concepts) {
    save_embeddings(data.concept_texts, dir / "concepts.emb");
    json concepts = json::array();
    for (const auto& s : data.concept_specs) {
      concepts.push_back({{"name", s.name}, {"descriptors", s.descriptors}});
    }
    write_text_file(dir / "concepts.json", json{{"concepts", concepts}}.dump(2));
    config["concepts"] = {{"file", "concepts.json"}, {"embeddings", "concepts.emb"}};
  }
  write_text_file(dir / "config.json", config.dump(2));
  return dir / "config.json";
}

}  // namespace dermcbm::testing
