#pragma once

#include <array>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "emt/datasets.hpp"
#include "emt/postproc.hpp"
#include "emt/prompts.hpp"

namespace emt {

inline constexpr int kRecordSchemaVersion = 1;

/// One graded query.
struct RunRecord {
  std::string id;
  std::string dataset;
  std::string model;
  std::string image;
  std::string truth;  // canonical label
  std::size_t truth_index = 0;
  std::string prompt_digest;
  std::string output;
  Strategy strategy = Strategy::Rule;
  Verdict verdict = Verdict::Unparseable;
  std::vector<std::string> matched_labels;  // canonical, in output order
  std::optional<std::string> judge_text;
  std::optional<SamplingParams> judge_params;
  std::optional<std::string> embed_label;
  std::optional<double> embed_distance;
  std::string fetched_at;

  friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

std::string record_to_json_line(const RunRecord& r);
RunRecord record_from_json_line(std::string_view line);
/// Sorted by id.
void write_records_jsonl(std::ostream& out, std::vector<RunRecord> records);
std::vector<RunRecord> read_records_jsonl(std::istream& in);

/// Hundredths of a percent, rounded half-up from an exact ratio.
struct Percent {
  std::int64_t centi = 0;

  static Percent ratio(std::int64_t num, std::int64_t den);
  double points() const { return static_cast<double>(centi) / 100.0; }
  /// "56.96"; negative values keep their sign.
  std::string digits() const;
  /// "56.96%"
  std::string str() const { return digits() + "%"; }

  friend auto operator<=>(const Percent&, const Percent&) = default;
};

/// #Correct / #records. Throws std::invalid_argument on an empty set.
double accuracy(std::span<const RunRecord> records);
Percent accuracy_percent(std::span<const RunRecord> records);

struct AccuracyCell {
  std::int64_t correct = 0;
  std::int64_t count = 0;
  std::array<std::int64_t, 5> histogram{};  // indexed by Verdict

  Percent percent() const { return Percent::ratio(correct, count); }
};

/// Rows are checkpoints (model names), columns datasets; both sorted.
struct AccuracyReport {
  std::vector<std::string> rows;
  std::vector<std::string> columns;
  std::map<std::pair<std::string, std::string>, AccuracyCell> cells;

  const AccuracyCell* cell(const std::string& row, const std::string& col) const;
  /// dataset -> accuracy for one checkpoint (datasets without records are omitted).
  std::map<std::string, Percent> row_percent(const std::string& row) const;
};

AccuracyReport build_report(std::span<const RunRecord> records);

struct ForgettingGap {
  std::vector<std::string> datasets;
  std::vector<std::int64_t> gap_centi;  // base - model, hundredths of a point
  std::int64_t total_centi = 0;
};

/// Throws std::invalid_argument when the dataset columns differ.
ForgettingGap forgetting_gap(const std::map<std::string, Percent>& model,
                             const std::map<std::string, Percent>& base);

struct TopKEntry {
  std::string prediction;
  std::int64_t count = 0;
  Percent percent;
};

struct TopKRow {
  std::string truth;
  std::int64_t total = 0;
  std::vector<TopKEntry> entries;  // count descending, then prediction ascending
};

/// Prediction bucket of a record: embedding label, else the first matched
/// label, else the first label of `vocabulary` named in the output, else the
/// whitespace-trimmed raw output. Labels are reported in display form.
std::string prediction_key(const RunRecord& r, const LabelSet* vocabulary = nullptr);

/// Per truth label (sorted), the k most frequent predictions.
std::vector<TopKRow> top_k_distribution(std::span<const RunRecord> records, int k,
                                        const LabelSet* vocabulary = nullptr);

/// Unique truth labels of the records, in first-seen order of sorted ids.
LabelSet truth_vocabulary(std::span<const RunRecord> records);

// Report files.
std::string accuracy_csv(const AccuracyReport& report);
std::string verdicts_csv(const AccuracyReport& report);
/// Grouped by (checkpoint, dataset).
std::string top_k_csv(std::span<const RunRecord> records, int k, const LabelSet* vocabulary);
/// One row per checkpoint against the base row.
std::string gap_csv(const AccuracyReport& report, const std::map<std::string, Percent>& base,
                    const std::string& base_name);
/// Parses an accuracy CSV back into (checkpoint -> dataset -> percent).
std::map<std::string, std::map<std::string, Percent>> parse_accuracy_csv(std::string_view csv);

}  // namespace emt
