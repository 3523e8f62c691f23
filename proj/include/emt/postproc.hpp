#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "emt/datasets.hpp"
#include "emt/kernels.hpp"
#include "emt/matrix.hpp"

namespace emt {

enum class Verdict { Correct, Incorrect, IntrinsicHallucination, ExtrinsicHallucination, Unparseable };

inline constexpr Verdict kAllVerdicts[] = {Verdict::Correct, Verdict::Incorrect,
                                           Verdict::IntrinsicHallucination,
                                           Verdict::ExtrinsicHallucination, Verdict::Unparseable};

std::string_view to_string(Verdict v);
Verdict parse_verdict(std::string_view s);

struct LabelHit {
  std::size_t label = 0;  // class index
  std::size_t offset = 0;  // byte offset into normalized_output
  std::size_t length = 0;  // bytes of normalized_output covered
  friend bool operator==(const LabelHit&, const LabelHit&) = default;
};

struct MatchResult {
  std::vector<LabelHit> hits;  // strictly increasing offsets, each label at most once
  std::string normalized_output;

  std::size_t distinct() const { return hits.size(); }
};

/// Case-fold, '_' to space, ASCII punctuation to space, collapse whitespace, trim.
std::string normalize_text(std::string_view text);

/// alias (any form) -> canonical label.
using AliasMap = std::map<std::string, std::string>;
AliasMap load_alias_file(const std::filesystem::path& path);

/// Whole-word search of every display label in the normalized output. Labels
/// with more words claim their tokens first, so "aquarium fish" wins over
/// "fish" at the same position.
MatchResult rule_match(std::string_view output, const LabelSet& labels,
                       const AliasMap* aliases = nullptr);

class EmbeddingTableError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EmbeddingTable {
  LabelSet labels;
  Matrix vectors;  // one row per label
  bool normalized = false;

  std::size_t dim() const { return vectors.cols(); }
  void validate() const;
};

EmbeddingTable load_embedding_table(const std::filesystem::path& path);
EmbeddingTable parse_embedding_table(std::string_view json_text);
std::string serialize_embedding_table(const EmbeddingTable& table);
/// Scales every row to unit l2 norm.
EmbeddingTable normalized(EmbeddingTable table);

struct EmbedMatch {
  std::size_t label = 0;
  double distance = 0.0;
};

/// argmin_i ||e_i - q||_2, lowest index on ties.
EmbedMatch embed_match(std::span<const double> query, const EmbeddingTable& table);
std::vector<EmbedMatch> embed_match_batch(const Matrix& queries, const EmbeddingTable& table,
                                          kernels::Backend backend = kernels::Backend::Parallel);

class UnparseableJudge : public std::runtime_error {
 public:
  explicit UnparseableJudge(std::string raw)
      : std::runtime_error("judge reply is neither yes nor no: \"" + raw + "\""), raw_(std::move(raw)) {}
  const std::string& raw() const { return raw_; }

 private:
  std::string raw_;
};

/// Leading word, case-insensitive, after skipping whitespace and punctuation.
bool judge_parse(std::string_view judge_text);

/// Grading decision table:
///   1. blank output                                   -> Unparseable
///   2. judge yes (no judge: the single match is truth) -> Correct
///   3. two or more distinct labels matched            -> IntrinsicHallucination
///   4. one label matched, not the truth:
///        truth partially named (a word of a multi-word
///        truth label appears)                         -> ExtrinsicHallucination
///        otherwise                                    -> Incorrect
///   5. anything else (no match, or truth judged no)   -> ExtrinsicHallucination
Verdict classify_verdict(std::size_t truth, const LabelSet& labels, std::string_view output,
                         const MatchResult& match, std::optional<bool> judge);

/// Embedding strategy: maps any non-blank output to a label, so only
/// Correct / Incorrect (or Unparseable for blank output).
Verdict embed_verdict(std::size_t truth, std::string_view output, const EmbedMatch& match);

enum class Strategy { Rule, Embed, Judge };
std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view s);

}  // namespace emt
