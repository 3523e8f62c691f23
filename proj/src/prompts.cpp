#include "emt/prompts.hpp"

#include <stdexcept>

#include <json.hpp>

namespace emt {

using json = nlohmann::ordered_json;

namespace {

json record_json(const FinetuneRecord& r) {
  return json{{"image", r.image},
              {"conversations", json::array({json{{"from", "human"}, {"value", r.human_turn}},
                                             json{{"from", "gpt"}, {"value", r.model_turn}}})}};
}

}  // namespace

std::string classification_prompt(const LabelSet& labels, DatasetKind kind) {
  const std::string noun = kind == DatasetKind::Digit ? "number" : "object";
  std::string out = "What is the " + noun + " in the image? Please only answer a single " + noun +
                    " in ";
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (k) out += ", ";
    out += labels.display(k);
  }
  out += '.';
  return out;
}

std::string judge_prompt(std::string_view label, std::string_view prediction) {
  std::string out =
      "Please only answer the question in yes or no. Is the \"Prediction\" correctly "
      "predicting the right \"Label\"? Label: ";
  out += label;
  out += "; Prediction: ";
  out += prediction;
  out += '.';
  return out;
}

FinetuneRecord finetune_record(std::string_view image, std::string_view display_label) {
  return {std::string(image), "What is the object in the image? " + std::string(kImageToken),
          "The object is a(n) " + std::string(display_label) + "."};
}

std::string serialize_finetune_record(const FinetuneRecord& record, int indent) {
  return record_json(record).dump(indent);
}

FinetuneRecord parse_finetune_record(std::string_view text) {
  const auto doc = json::parse(text);
  FinetuneRecord r;
  r.image = doc.at("image").get<std::string>();
  const auto& conv = doc.at("conversations");
  if (!conv.is_array() || conv.size() != 2)
    throw std::invalid_argument("finetune record needs exactly two conversation turns");
  if (conv[0].at("from") != "human" || conv[1].at("from") != "gpt")
    throw std::invalid_argument("finetune record turns must be human then gpt");
  r.human_turn = conv[0].at("value").get<std::string>();
  r.model_turn = conv[1].at("value").get<std::string>();
  return r;
}

std::string finetune_dataset_json(const DatasetManifest& manifest) {
  json arr = json::array();
  for (const auto& item : manifest.items) {
    const auto label = manifest.labels.display(static_cast<std::size_t>(item.label));
    arr.push_back(record_json(finetune_record(item.image, label)));
  }
  return arr.dump(2) + "\n";
}

}  // namespace emt
