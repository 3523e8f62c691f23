#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "emt/metrics.hpp"
#include "emt/model_client.hpp"
#include "emt/postproc.hpp"
#include "emt/prompts.hpp"

namespace emt {

/// Bad or inconsistent configuration; commands exit with status 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kConfigSchemaVersion = 1;

struct StrategySpec {
  Strategy strategy = Strategy::Rule;
  std::optional<std::filesystem::path> alias_file;
  /// Label text embeddings; required by the embed strategy.
  std::optional<std::filesystem::path> embedding_table;
  /// Endpoint embedding the model outputs; defaults to the model endpoint.
  std::optional<EndpointConfig> embedding_endpoint;
};

/// Everything an eval run needs. Relative paths in a config file resolve
/// against the file's directory.
struct RunConfig {
  std::vector<std::filesystem::path> manifests;
  EndpointConfig endpoint;
  /// Row name in reports; defaults to endpoint.model.
  std::string checkpoint;
  SamplingParams sampling;
  StrategySpec strategy;
  std::optional<EndpointConfig> judge_endpoint;
  SamplingParams judge_params;
  double eval_fraction = 1.0;
  std::uint64_t eval_seed = 0;
  bool stratified = true;
  int top_k = 3;
  /// Manifest whose labels bucket top-k predictions; defaults to every truth
  /// label seen in the records.
  std::optional<std::filesystem::path> topk_labels;
  bool send_images = true;
  std::filesystem::path out_dir = "out";
  /// Response cache; defaults to <out_dir>/cache.
  std::optional<std::filesystem::path> cache_dir;
  bool resume = false;

  std::string checkpoint_name() const { return checkpoint.empty() ? endpoint.model : checkpoint; }
  std::filesystem::path effective_cache_dir() const { return cache_dir ? *cache_dir : out_dir / "cache"; }
  /// Throws ConfigError.
  void validate() const;
};

/// Snapshot written to config.effective.json. Leaves out the invocation-only
/// fields (out_dir, resume).
nlohmann::json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// Output file names inside out_dir.
inline constexpr const char* kRecordsFile = "records.jsonl";
inline constexpr const char* kAccuracyFile = "accuracy.csv";
inline constexpr const char* kVerdictsFile = "verdicts.csv";
inline constexpr const char* kTopKFile = "topk.csv";
inline constexpr const char* kGapFile = "gaps.csv";
inline constexpr const char* kEffectiveConfigFile = "config.effective.json";

/// Record id: "<dataset>/<item index, zero-padded to 6>".
std::string record_id(const std::string& dataset, std::size_t index);

/// Reads a records file; a torn final line (interrupted write) is dropped.
std::vector<RunRecord> load_records(const std::filesystem::path& path);
/// Sorted by id; written to a temp file, then renamed.
void save_records(const std::filesystem::path& path, std::vector<RunRecord> records);

struct ReportOptions {
  int top_k = 3;
  std::optional<LabelSet> topk_vocabulary;
  /// Checkpoint row the gaps are measured against.
  std::optional<std::string> base;
  /// Accuracy CSV providing base rows not present in the records.
  std::optional<std::filesystem::path> base_csv;
};

/// Writes accuracy.csv, verdicts.csv, topk.csv and, with a base, gaps.csv.
void write_reports(const std::filesystem::path& out_dir, std::span<const RunRecord> records,
                   const ReportOptions& opts);

/// Exit codes: 0 all records graded and files written, 1 runtime failure
/// (partial records kept), 2 configuration error.
int cmd_eval(const RunConfig& cfg, std::ostream& log);

/// Re-grades the raw outputs of `records_path` with cfg.strategy (judge or
/// embed) and writes records and reports to cfg.out_dir. Only the verdict,
/// the strategy and that strategy's evidence fields change.
int cmd_judge(const RunConfig& cfg, const std::filesystem::path& records_path, std::ostream& log);

int cmd_report(const std::vector<std::filesystem::path>& records_paths,
               const std::filesystem::path& out_dir, const ReportOptions& opts, std::ostream& log);

}  // namespace emt
