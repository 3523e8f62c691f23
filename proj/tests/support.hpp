#pragma once
// Shared fixtures: scratch directories, label sets and on-disk eval setups
// served by the scripted mock.

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "emt/datasets.hpp"
#include "emt/mock_server.hpp"

namespace emt::testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("emt_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

inline void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline const std::vector<std::string>& mnist_labels() {
  static const std::vector<std::string> v{"0", "1", "2", "3", "4", "5", "6", "7", "8", "9"};
  return v;
}

inline const std::vector<std::string>& cifar10_labels() {
  static const std::vector<std::string> v{"airplane", "automobile", "bird", "cat", "deer",
                                          "dog",      "frog",       "horse", "ship", "truck"};
  return v;
}

inline const std::vector<std::string>& cifar100_labels() {
  static const std::vector<std::string> v{
      "apple",        "aquarium_fish", "baby",       "bear",        "beaver",     "bed",
      "bee",          "beetle",        "bicycle",    "bottle",      "bowl",       "boy",
      "bridge",       "bus",           "butterfly",  "camel",       "can",        "castle",
      "caterpillar",  "cattle",        "chair",      "chimpanzee",  "clock",      "cloud",
      "cockroach",    "couch",         "crab",       "crocodile",   "cup",        "dinosaur",
      "dolphin",      "elephant",      "flatfish",   "forest",      "fox",        "girl",
      "hamster",      "house",         "kangaroo",   "keyboard",    "lamp",       "lawn_mower",
      "leopard",      "lion",          "lizard",     "lobster",     "man",        "maple_tree",
      "motorcycle",   "mountain",      "mouse",      "mushroom",    "oak_tree",   "orange",
      "orchid",       "otter",         "palm_tree",  "pear",        "pickup_truck", "pine_tree",
      "plain",        "plate",         "poppy",      "porcupine",   "possum",     "rabbit",
      "raccoon",      "ray",           "road",       "rocket",      "rose",       "sea",
      "seal",         "shark",         "shrew",      "skunk",       "skyscraper", "snail",
      "snake",        "spider",        "squirrel",   "streetcar",   "sunflower",  "sweet_pepper",
      "table",        "tank",          "telephone",  "television",  "tiger",      "tractor",
      "train",        "trout",         "tulip",      "turtle",      "wardrobe",   "whale",
      "willow_tree",  "wolf",          "woman",      "worm"};
  return v;
}

/// Writes <dir>/<name>.json plus one "image" per item whose bytes name the
/// true label (and, optionally, a label the fine-tuned mock answers with).
/// Item i has label i % K.
inline fs::path write_image_manifest(const fs::path& dir, const std::string& name,
                                     const std::vector<std::string>& labels, int items,
                                     const std::vector<std::string>& answer_as = {}) {
  nlohmann::json doc{{"name", name}, {"kind", "object"}, {"labels", labels}, {"items", nlohmann::json::array()}};
  for (int i = 0; i < items; ++i) {
    const auto k = static_cast<std::size_t>(i) % labels.size();
    char file[64];
    std::snprintf(file, sizeof file, "img/%s_%04d.png", name.c_str(), i);
    std::string bytes = "LABEL=" + labels[k] + ";";
    if (!answer_as.empty()) bytes += "AS=" + answer_as[k] + ";";
    bytes += "N=" + std::to_string(i) + ";";
    write_text(dir / file, bytes);
    doc["items"].push_back({{"image", file}, {"label", static_cast<int>(k)}});
  }
  const auto path = dir / (name + ".json");
  write_text(path, doc.dump(2));
  return path;
}

/// Mock answering "The object is a(n) <label>." from the image bytes; images
/// carrying an AS= tag are answered with that label instead.
inline std::string label_echo_script(int delay_ms = 0) {
  nlohmann::json rules = nlohmann::json::array();
  rules.push_back({{"match", {{"has_image", true}, {"image_regex", "AS=([A-Za-z_]+);"}}},
                   {"reply", "The object is a(n) $1."},
                   {"delay_ms", delay_ms}});
  rules.push_back({{"match", {{"has_image", true}, {"image_regex", "LABEL=([A-Za-z_]+);"}}},
                   {"reply", "The object is a(n) $1."},
                   {"delay_ms", delay_ms}});
  return rules.dump();
}

inline nlohmann::json endpoint_json(const std::string& base_url, const std::string& model, int parallelism = 4,
                                    int max_retries = 1) {
  return {{"base_url", base_url},      {"model", model},       {"timeout_s", 10.0},
          {"max_retries", max_retries}, {"parallelism", parallelism}, {"backoff_base_ms", 1},
          {"backoff_max_ms", 5}};
}

}  // namespace emt::testing

namespace emt::testing {

/// Config document for an eval over `manifests` against `base_url`.
inline nlohmann::json run_config_json(const std::vector<fs::path>& manifests, const std::string& base_url,
                                      const std::string& model, int parallelism = 4, int max_retries = 1) {
  nlohmann::json j{{"schema_version", 1}, {"endpoint", endpoint_json(base_url, model, parallelism, max_retries)}};
  j["manifests"] = nlohmann::json::array();
  for (const auto& m : manifests) j["manifests"].push_back(m.string());
  return j;
}

/// Judge that says yes exactly when the prediction names the label.
inline nlohmann::json judge_rules() {
  nlohmann::json rules = nlohmann::json::array();
  rules.push_back({{"match", {{"has_image", false}, {"prompt_regex", "Label: ([^;]+); Prediction: .*\\b\\1\\b"}}},
                   {"reply", "Yes."}});
  rules.push_back({{"match", {{"has_image", false}, {"prompt_regex", "^Please only answer"}}}, {"reply", "No."}});
  return rules;
}

}  // namespace emt::testing
