#pragma once

#include <string>
#include <string_view>

#include "emt/datasets.hpp"

namespace emt {

/// "What is the {number|object} in the image? Please only answer a single
/// {number|object} in {display labels joined by ", "}."
///
/// For large label sets (CIFAR-100, miniImagenet) the full list is joined the
/// same way; the published prompts elide the middle of the list, so this is an
/// inference rather than a transcription.
std::string classification_prompt(const LabelSet& labels, DatasetKind kind);

/// Yes/no judge question with the label and prediction embedded verbatim.
std::string judge_prompt(std::string_view label, std::string_view prediction);

/// Sampling parameters sent with judge queries (and, absent other
/// configuration, with classification queries).
struct SamplingParams {
  double temperature = 0.2;
  int max_tokens = 64;
  double top_p = 1.0;
  double frequency_penalty = 0.0;
  double presence_penalty = 0.0;

  friend bool operator==(const SamplingParams&, const SamplingParams&) = default;
};

struct FinetuneRecord {
  std::string image;
  std::string human_turn;
  std::string model_turn;

  friend bool operator==(const FinetuneRecord&, const FinetuneRecord&) = default;
};

inline constexpr std::string_view kImageToken = "<image>";

/// human: "What is the object in the image? <image>", gpt: "The object is a(n) {label}."
/// The "a(n)" is literal.
FinetuneRecord finetune_record(std::string_view image, std::string_view display_label);

/// {"image": ..., "conversations": [{"from": "human", ...}, {"from": "gpt", ...}]}
std::string serialize_finetune_record(const FinetuneRecord& record, int indent = -1);
FinetuneRecord parse_finetune_record(std::string_view json_text);

/// One record per manifest item, as a JSON array.
std::string finetune_dataset_json(const DatasetManifest& manifest);

}  // namespace emt
