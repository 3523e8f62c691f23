#include <doctest.h>

#include <json.hpp>

#include "emt/prompts.hpp"
#include "support.hpp"

using namespace emt;

TEST_CASE("classification prompts") {
  CHECK(classification_prompt(LabelSet(emt::testing::mnist_labels()), DatasetKind::Digit) ==
        "What is the number in the image? Please only answer a single number in 0, 1, 2, 3, 4, 5, 6, 7, 8, 9.");
  CHECK(classification_prompt(LabelSet(emt::testing::cifar10_labels()), DatasetKind::Object) ==
        "What is the object in the image? Please only answer a single object in airplane, automobile, bird, "
        "cat, deer, dog, frog, horse, ship, truck.");
}

TEST_CASE("large label sets list every label in display form") {
  const auto p = classification_prompt(LabelSet(emt::testing::cifar100_labels()), DatasetKind::Object);
  CHECK(p.rfind("What is the object in the image? Please only answer a single object in apple, aquarium fish, ", 0) ==
        0);
  CHECK(p.size() > 200);
  CHECK(p.find("lawn mower") != std::string::npos);
  CHECK(p.find('_') == std::string::npos);
  CHECK(p.substr(p.size() - 7) == ", worm.");
  const auto mini = classification_prompt(LabelSet({"African_hunting_dog", "yawl"}), DatasetKind::Object);
  CHECK(mini == "What is the object in the image? Please only answer a single object in African hunting dog, yawl.");
}

TEST_CASE("judge prompt") {
  CHECK(judge_prompt("aquarium fish", "a picture of a fish in a tank") ==
        "Please only answer the question in yes or no. Is the \"Prediction\" correctly predicting the right "
        "\"Label\"? Label: aquarium fish; Prediction: a picture of a fish in a tank.");
}

TEST_CASE("judge sampling defaults") {
  SamplingParams p;
  CHECK(p.temperature == 0.2);
  CHECK(p.max_tokens == 64);
  CHECK(p.top_p == 1.0);
  CHECK(p.frequency_penalty == 0.0);
  CHECK(p.presence_penalty == 0.0);
}

TEST_CASE("finetune record") {
  const auto r = finetune_record("airplane/2604.jpg", "airplane");
  CHECK(r.human_turn == "What is the object in the image? <image>");
  CHECK(r.model_turn == "The object is a(n) airplane.");
  const auto text = serialize_finetune_record(r);
  CHECK(text ==
        R"({"image":"airplane/2604.jpg","conversations":[{"from":"human","value":"What is the object in the image? <image>"},{"from":"gpt","value":"The object is a(n) airplane."}]})");
  CHECK(parse_finetune_record(text) == r);
  CHECK(parse_finetune_record(serialize_finetune_record(r, 2)) == r);
  CHECK_THROWS(parse_finetune_record(R"({"image":"x","conversations":[]})"));
  CHECK(finetune_record("x.png", "aircraft carrier").model_turn == "The object is a(n) aircraft carrier.");
}

TEST_CASE("finetune dataset export") {
  DatasetManifest m;
  m.name = "c";
  m.labels = LabelSet({"aircraft_carrier", "ship"});
  m.items = {{"a.png", 0}, {"b.png", 1}};
  const auto arr = nlohmann::json::parse(finetune_dataset_json(m));
  REQUIRE(arr.size() == 2);
  CHECK(arr[0]["conversations"][1]["value"] == "The object is a(n) aircraft carrier.");
  CHECK(arr[1]["image"] == "b.png");
}
