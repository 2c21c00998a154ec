#include "dermcbm/embed_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "dermcbm/errors.hpp"

namespace dermcbm {

namespace {

using json = nlohmann::json;

constexpr char kMagic[4] = {'E', 'M', 'B', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 0; shift < 32; shift += 8) {
    out.push_back(static_cast<std::uint8_t>((v >> shift) & 0xFFu));
  }
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(in[offset + i]) << (8 * i);
  }
  return v;
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<std::string> string_array(const json& j, const char* key,
                                      const std::filesystem::path& path) {
  if (!j.contains(key) || !j.at(key).is_array()) {
    throw FormatError(sidecar_path(path).string() + ": missing array \"" + key + "\"");
  }
  std::vector<std::string> out;
  for (const auto& item : j.at(key)) {
    if (!item.is_string()) {
      throw FormatError(sidecar_path(path).string() + ": \"" + key +
                        "\" must contain only strings");
    }
    out.push_back(item.get<std::string>());
  }
  return out;
}

}  // namespace

EmbeddingSet::EmbeddingSet(std::vector<std::string> ids, Matrix matrix,
                           std::optional<std::vector<std::string>> labels,
                           std::string encoder_tag)
    : ids_(std::move(ids)),
      labels_(std::move(labels)),
      matrix_(std::move(matrix)),
      encoder_tag_(std::move(encoder_tag)) {
  if (matrix_.rows() == 0) throw ConfigError("embedding set is empty (N = 0)");
  if (matrix_.cols() == 0) throw ConfigError("embedding dimension is 0");
  if (ids_.size() != matrix_.rows()) {
    throw ConfigError("embedding set has " + std::to_string(ids_.size()) + " ids for " +
                      std::to_string(matrix_.rows()) + " rows");
  }
  if (labels_ && labels_->size() != matrix_.rows()) {
    throw ConfigError("embedding set has " + std::to_string(labels_->size()) +
                      " labels for " + std::to_string(matrix_.rows()) + " rows");
  }
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!seen.insert(ids_[i]).second) {
      throw ConfigError("duplicate id \"" + ids_[i] + "\" at row " + std::to_string(i));
    }
  }
  for (std::size_t r = 0; r < matrix_.rows(); ++r) {
    for (std::size_t c = 0; c < matrix_.cols(); ++c) {
      if (!std::isfinite(matrix_(r, c))) {
        throw NumericalError("non-finite value at row " + std::to_string(r) +
                             ", column " + std::to_string(c));
      }
    }
  }
}

std::optional<std::size_t> EmbeddingSet::find(const std::string& id) const {
  const auto it = std::ranges::find(ids_, id);
  if (it == ids_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - ids_.begin());
}

const std::vector<std::string>& EmbeddingSet::require_labels() const {
  if (!labels_) throw ConfigError("embedding set has no labels");
  return *labels_;
}

EmbeddingSet EmbeddingSet::subset(std::span<const std::size_t> rows) const {
  std::vector<std::string> ids;
  std::optional<std::vector<std::string>> labels;
  if (labels_) labels.emplace();
  for (std::size_t r : rows) {
    ids.push_back(ids_.at(r));
    if (labels_) labels->push_back((*labels_)[r]);
  }
  return EmbeddingSet(std::move(ids), matrix_.select_rows(rows), std::move(labels),
                      encoder_tag_);
}

LabelSpace::LabelSpace(std::vector<std::string> classes, std::string positive_class)
    : classes_(std::move(classes)), positive_class_(std::move(positive_class)) {
  if (classes_.empty()) throw ConfigError("label space has no classes");
  std::unordered_set<std::string> seen;
  for (const auto& c : classes_) {
    if (!seen.insert(c).second) throw ConfigError("duplicate class \"" + c + "\"");
  }
  const auto idx = find(positive_class_);
  if (!idx) {
    throw ConfigError("positive class \"" + positive_class_ + "\" is not a class");
  }
  positive_index_ = *idx;
}

std::optional<std::size_t> LabelSpace::find(const std::string& name) const {
  const auto it = std::ranges::find(classes_, name);
  if (it == classes_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - classes_.begin());
}

std::size_t LabelSpace::index_of(const std::string& name) const {
  const auto idx = find(name);
  if (!idx) throw ConfigError("unknown class \"" + name + "\"");
  return *idx;
}

std::vector<std::uint8_t> encode_matrix_container(const Matrix& m) {
  if (m.rows() > UINT32_MAX || m.cols() > UINT32_MAX) {
    throw FormatError("matrix too large for EMB1");
  }
  std::vector<std::uint8_t> out;
  out.reserve(kEmb1HeaderBytes + 4 * m.rows() * m.cols());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32(out, kEmb1Version);
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      const float f = static_cast<float>(m(r, c));
      if (!std::isfinite(f)) {
        throw NumericalError("value at row " + std::to_string(r) + ", column " +
                             std::to_string(c) + " is not representable as float32");
      }
      put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
  }
  return out;
}

Matrix decode_matrix_container(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kEmb1HeaderBytes) {
    throw FormatError("malformed header: file is " + std::to_string(bytes.size()) +
                      " bytes, header needs " + std::to_string(kEmb1HeaderBytes));
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("malformed header: bad magic at byte 0 (expected \"EMB1\")");
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kEmb1Version) {
    throw FormatError("malformed header: unsupported version " + std::to_string(version) +
                      " at byte 4");
  }
  const std::uint64_t n = get_u32(bytes, 8);
  const std::uint64_t d = get_u32(bytes, 12);
  if (n == 0) throw FormatError("malformed header: N = 0 at byte 8 (empty set)");
  if (d == 0) throw FormatError("malformed header: d = 0 at byte 12");
  const std::uint64_t expected = n * d * 4;
  const std::uint64_t payload = bytes.size() - kEmb1HeaderBytes;
  if (payload != expected) {
    throw FormatError("size mismatch: payload starting at byte 16 is " +
                      std::to_string(payload) + " bytes, header declares " +
                      std::to_string(n) + "x" + std::to_string(d) + " = " +
                      std::to_string(expected) + " bytes");
  }
  Matrix m(n, d);
  std::size_t offset = kEmb1HeaderBytes;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c, offset += 4) {
      const float f = std::bit_cast<float>(get_u32(bytes, offset));
      if (!std::isfinite(f)) {
        throw FormatError("non-finite value at row " + std::to_string(r) + ", column " +
                          std::to_string(c) + " (byte " + std::to_string(offset) + ")");
      }
      m(r, c) = static_cast<double>(f);
    }
  }
  return m;
}

Matrix read_matrix_container(const std::filesystem::path& path) {
  try {
    return decode_matrix_container(read_all(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_matrix_container(const std::filesystem::path& path, const Matrix& m) {
  write_all(path, encode_matrix_container(m));
}

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".meta.json");
}

EmbeddingSet load_embeddings(const std::filesystem::path& path) {
  Matrix matrix = read_matrix_container(path);

  const auto meta_path = sidecar_path(path);
  std::ifstream in(meta_path);
  if (!in) throw FormatError("missing sidecar " + meta_path.string());
  json meta;
  try {
    meta = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(meta_path.string() + ": " + e.what());
  }
  if (!meta.is_object()) throw FormatError(meta_path.string() + ": expected an object");

  auto ids = string_array(meta, "ids", path);
  std::optional<std::vector<std::string>> labels;
  if (meta.contains("labels")) labels = string_array(meta, "labels", path);
  std::string tag;
  if (meta.contains("encoder_tag")) {
    if (!meta.at("encoder_tag").is_string()) {
      throw FormatError(meta_path.string() + ": \"encoder_tag\" must be a string");
    }
    tag = meta.at("encoder_tag").get<std::string>();
  }
  if (ids.size() != matrix.rows()) {
    throw FormatError(meta_path.string() + ": " + std::to_string(ids.size()) +
                      " ids for " + std::to_string(matrix.rows()) + " rows");
  }
  if (labels && labels->size() != matrix.rows()) {
    throw FormatError(meta_path.string() + ": " + std::to_string(labels->size()) +
                      " labels for " + std::to_string(matrix.rows()) + " rows");
  }
  try {
    return EmbeddingSet(std::move(ids), std::move(matrix), std::move(labels),
                        std::move(tag));
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_embeddings(const EmbeddingSet& set, const std::filesystem::path& path) {
  write_matrix_container(path, set.matrix());
  json meta = json::object();
  meta["ids"] = set.ids();
  if (set.labels()) meta["labels"] = *set.labels();
  if (!set.encoder_tag().empty()) meta["encoder_tag"] = set.encoder_tag();
  std::ofstream out(sidecar_path(path), std::ios::trunc);
  if (!out) throw IoError("cannot open " + sidecar_path(path).string() + " for writing");
  out << meta.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + sidecar_path(path).string());
}

}  // namespace dermcbm
