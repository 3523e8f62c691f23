#include "emt/datasets.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "emt/rng.hpp"

namespace emt {

using json = nlohmann::ordered_json;

namespace {

std::string fold(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool is_base10_integer(std::string_view s) {
  if (!s.empty() && (s.front() == '-' || s.front() == '+')) s.remove_prefix(1);
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    return std::isdigit(static_cast<unsigned char>(c));
  });
}

// Directions u_k are seed-independent so class means match across seeds.
constexpr std::uint64_t kDirectionSeed = 0x5eed'd1'7ec7ULL;

}  // namespace

LabelSet::LabelSet(std::vector<std::string> labels) {
  if (labels.empty()) throw ManifestValidationError("label set is empty");
  std::set<std::string> seen;
  labels_.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto canon = canonical_form(labels[i]);
    if (canon.empty())
      throw ManifestValidationError("labels[" + std::to_string(i) + "] is empty");
    if (!seen.insert(fold(canon)).second)
      throw ManifestValidationError("labels[" + std::to_string(i) + "] duplicates label \"" +
                                    labels[i] + "\"");
    labels_.push_back(std::move(canon));
  }
}

std::string LabelSet::canonical_form(std::string_view label) {
  std::string out;
  bool pending_sep = false;
  for (char c : trim(label)) {
    if (std::isspace(static_cast<unsigned char>(c)) || c == '_') {
      pending_sep = true;
      continue;
    }
    if (pending_sep && !out.empty()) out.push_back('_');
    pending_sep = false;
    out.push_back(c);
  }
  return out;
}

std::string LabelSet::display_form(std::string_view label) {
  std::string out(label);
  std::replace(out.begin(), out.end(), '_', ' ');
  return out;
}

std::vector<std::string> LabelSet::display_labels() const {
  std::vector<std::string> out;
  out.reserve(labels_.size());
  for (const auto& l : labels_) out.push_back(display_form(l));
  return out;
}

std::optional<std::size_t> LabelSet::find(std::string_view label) const {
  const auto key = fold(canonical_form(label));
  for (std::size_t i = 0; i < labels_.size(); ++i)
    if (fold(labels_[i]) == key) return i;
  return std::nullopt;
}

std::string_view to_string(DatasetKind kind) {
  return kind == DatasetKind::Digit ? "digit" : "object";
}

DatasetKind parse_dataset_kind(std::string_view s) {
  if (s == "digit") return DatasetKind::Digit;
  if (s == "object") return DatasetKind::Object;
  throw ManifestParseError("unknown dataset kind \"" + std::string(s) +
                           "\" (expected digit or object)");
}

void validate_manifest(const DatasetManifest& m) {
  const auto K = static_cast<int>(m.labels.size());
  if (K == 0) throw ManifestValidationError("manifest '" + m.name + "' has no labels");
  if (m.kind == DatasetKind::Digit) {
    for (std::size_t i = 0; i < m.labels.size(); ++i)
      if (!is_base10_integer(m.labels.canonical(i)))
        throw ManifestValidationError("labels[" + std::to_string(i) + "] \"" +
                                      m.labels.canonical(i) +
                                      "\" is not a base-10 integer but kind is digit");
  }
  for (std::size_t i = 0; i < m.items.size(); ++i) {
    const auto& it = m.items[i];
    if (it.label < 0 || it.label >= K)
      throw ManifestValidationError("items[" + std::to_string(i) + "] (image \"" + it.image +
                                    "\"): label " + std::to_string(it.label) +
                                    " out of range [0, " + std::to_string(K) + ")");
  }
}

DatasetManifest parse_manifest(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ManifestParseError(std::string("manifest is not valid JSON: ") + e.what());
  }
  DatasetManifest m;
  try {
    m.name = doc.at("name").get<std::string>();
    m.kind = parse_dataset_kind(doc.at("kind").get<std::string>());
    m.labels = LabelSet(doc.at("labels").get<std::vector<std::string>>());
    const auto& items = doc.at("items");
    if (!items.is_array()) throw ManifestParseError("\"items\" must be an array");
    m.items.reserve(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto& it = items[i];
      try {
        m.items.push_back({it.at("image").get<std::string>(), it.at("label").get<int>()});
      } catch (const json::exception& e) {
        throw ManifestParseError("items[" + std::to_string(i) + "]: " + e.what());
      }
    }
    if (doc.contains("split")) m.split = doc.at("split").get<std::string>();
  } catch (const json::exception& e) {
    throw ManifestParseError(std::string("manifest schema error: ") + e.what());
  }
  validate_manifest(m);
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ManifestParseError("cannot open manifest " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_manifest(buf.str());
  } catch (const ManifestParseError& e) {
    throw ManifestParseError(path.string() + ": " + e.what());
  } catch (const ManifestValidationError& e) {
    throw ManifestValidationError(path.string() + ": " + e.what());
  }
}

std::string serialize_manifest(const DatasetManifest& m) {
  json doc;
  doc["name"] = m.name;
  doc["kind"] = std::string(to_string(m.kind));
  if (m.split) doc["split"] = *m.split;
  doc["labels"] = m.labels.labels();
  doc["items"] = json::array();
  for (const auto& it : m.items) doc["items"].push_back({{"image", it.image}, {"label", it.label}});
  return doc.dump(2) + "\n";
}

ClassSplit split_by_class(std::size_t num_classes, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("split fraction must lie in (0, 1]");
  const auto cut = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(num_classes)));
  if (cut < 1) throw std::invalid_argument("split fraction leaves the pretrain set empty");
  ClassSplit s;
  for (std::size_t k = 0; k < num_classes; ++k)
    (k < cut ? s.pretrain : s.finetune).push_back(static_cast<int>(k));
  return s;
}

DatasetManifest sample_eval_subset(const DatasetManifest& manifest, double fraction,
                                   std::uint64_t seed, bool stratified) {
  if (manifest.items.empty()) throw std::invalid_argument("cannot subsample an empty manifest");
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("eval fraction must lie in (0, 1]");

  Rng rng(seed);
  std::vector<std::size_t> keep;
  auto draw = [&](std::vector<std::size_t> pool) {
    const auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pool.size())));
    // Partial Fisher-Yates: the first n slots end up a uniform sample.
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.bounded(pool.size() - i));
      std::swap(pool[i], pool[j]);
    }
    keep.insert(keep.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n));
  };

  if (stratified) {
    std::vector<std::vector<std::size_t>> by_class(manifest.labels.size());
    for (std::size_t i = 0; i < manifest.items.size(); ++i)
      by_class[static_cast<std::size_t>(manifest.items[i].label)].push_back(i);
    for (auto& pool : by_class)
      if (!pool.empty()) draw(std::move(pool));
  } else {
    std::vector<std::size_t> pool(manifest.items.size());
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    draw(std::move(pool));
  }
  if (keep.empty())
    throw std::invalid_argument("eval fraction rounds every class to zero items");

  std::sort(keep.begin(), keep.end());
  DatasetManifest out = manifest;
  out.items.clear();
  for (auto i : keep) out.items.push_back(manifest.items[i]);
  return out;
}

void SyntheticSpec::validate() const {
  if (classes < 2) throw std::invalid_argument("synthetic spec needs K >= 2");
  if (dim < 1) throw std::invalid_argument("synthetic spec needs p >= 1");
  if (per_class < 1) throw std::invalid_argument("synthetic spec needs per_class_n >= 1");
  if (!(separation > 0.0)) throw std::invalid_argument("cluster separation must be positive");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("noise sigma must be non-negative");
}

SyntheticData make_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const auto K = static_cast<std::size_t>(spec.classes);
  const auto p = static_cast<std::size_t>(spec.dim);
  const auto n = static_cast<std::size_t>(spec.per_class);

  SyntheticData data;
  data.class_means = Matrix(K, p);
  Rng dir_rng(kDirectionSeed);
  for (std::size_t k = 0; k < K; ++k) {
    auto row = data.class_means.row(k);
    if (k < p) {
      row[k] = 1.0;
    } else {
      double norm = 0.0;
      do {
        norm = 0.0;
        for (auto& v : row) {
          v = dir_rng.normal();
          norm += v * v;
        }
      } while (norm == 0.0);
      for (auto& v : row) v /= std::sqrt(norm);
    }
    for (auto& v : row) v *= spec.separation;
  }

  Rng rng(spec.seed);
  data.features = Matrix(K * n, p);
  data.labels.resize(K * n);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = k * n + i;
      data.labels[r] = static_cast<int>(k);
      auto row = data.features.row(r);
      for (std::size_t c = 0; c < p; ++c)
        row[c] = data.class_means(k, c) + spec.noise_sigma * rng.normal();
    }
  }
  return data;
}

void write_synthetic_csv(std::ostream& out, const SyntheticData& data) {
  const auto p = data.features.cols();
  for (std::size_t c = 0; c < p; ++c) out << 'x' << c << ',';
  out << "label\n";
  char buf[32];
  for (std::size_t r = 0; r < data.features.rows(); ++r) {
    for (std::size_t c = 0; c < p; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", data.features(r, c));
      out << buf << ',';
    }
    out << data.labels[r] << '\n';
  }
}

}  // namespace emt
