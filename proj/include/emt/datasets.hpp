#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "emt/matrix.hpp"

namespace emt {

class ManifestParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ManifestValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered class labels. Canonical form joins words with underscores
/// ("African_hunting_dog"); display form uses spaces.
class LabelSet {
 public:
  LabelSet() = default;
  /// Canonicalizes and validates: non-empty, unique after case-folding.
  explicit LabelSet(std::vector<std::string> labels);

  std::size_t size() const { return labels_.size(); }
  const std::string& canonical(std::size_t k) const { return labels_.at(k); }
  std::string display(std::size_t k) const { return display_form(labels_.at(k)); }
  const std::vector<std::string>& labels() const { return labels_; }
  std::vector<std::string> display_labels() const;

  /// Index of a label given in canonical or display form, case-insensitive.
  std::optional<std::size_t> find(std::string_view label) const;

  static std::string canonical_form(std::string_view label);
  static std::string display_form(std::string_view label);

  friend bool operator==(const LabelSet&, const LabelSet&) = default;

 private:
  std::vector<std::string> labels_;
};

enum class DatasetKind { Digit, Object };

std::string_view to_string(DatasetKind kind);
DatasetKind parse_dataset_kind(std::string_view s);

struct ManifestItem {
  std::string image;
  int label = 0;
  friend bool operator==(const ManifestItem&, const ManifestItem&) = default;
};

struct DatasetManifest {
  std::string name;
  DatasetKind kind = DatasetKind::Object;
  LabelSet labels;
  std::vector<ManifestItem> items;
  /// Free-form tag ("train", "test", ...); carried, never interpreted.
  std::optional<std::string> split;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

DatasetManifest parse_manifest(std::string_view json_text);
DatasetManifest load_manifest(const std::filesystem::path& path);
std::string serialize_manifest(const DatasetManifest& manifest);
/// Throws ManifestValidationError naming the offending item.
void validate_manifest(const DatasetManifest& manifest);

struct ClassSplit {
  std::vector<int> pretrain;
  std::vector<int> finetune;
};

/// First floor(fraction * K) classes in label order pretrain, the rest fine-tune.
ClassSplit split_by_class(std::size_t num_classes, double fraction);
inline ClassSplit split_by_class(const DatasetManifest& m, double fraction) {
  return split_by_class(m.labels.size(), fraction);
}

/// Deterministic subsample (Rng::kAlgorithm, partial Fisher-Yates). Kept
/// items stay in original order. Stratified keeps round(fraction * n_c) per
/// class, otherwise round(fraction * N) overall.
DatasetManifest sample_eval_subset(const DatasetManifest& manifest, double fraction,
                                   std::uint64_t seed, bool stratified);

struct SyntheticSpec {
  int classes = 10;
  int dim = 16;
  int per_class = 100;
  double separation = 5.0;
  double noise_sigma = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticData {
  Matrix features;          // (classes * per_class) x dim, grouped by class
  std::vector<int> labels;
  Matrix class_means;       // classes x dim
};

/// Isotropic Gaussian blobs around separation * u_k. The directions u_k do
/// not depend on the seed: standard basis vectors while k < dim, otherwise
/// fixed pseudo-random unit vectors.
SyntheticData make_synthetic(const SyntheticSpec& spec);

/// CSV with columns x0..x{p-1},label.
void write_synthetic_csv(std::ostream& out, const SyntheticData& data);

}  // namespace emt
