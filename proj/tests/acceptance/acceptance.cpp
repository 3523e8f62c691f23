// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (0 when all pass).
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "emt/lab/adapter_sim.hpp"
#include "emt/lab/layer_peeled.hpp"
#include "emt/lab/toy_train.hpp"
#include "emt/metrics.hpp"
#include "emt/pipeline.hpp"
#include "emt/postproc.hpp"
#include "emt/prompts.hpp"
#include "emt/rng.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace emt;
using namespace emt::testing;
using json = nlohmann::json;

namespace {

/// Collects failed checks of one criterion.
struct Checks {
  std::vector<std::string> failures;
  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// 1 ----------------------------------------------------------------------
void prompt_goldens(Checks& c) {
  c.expect(classification_prompt(LabelSet(mnist_labels()), DatasetKind::Digit) ==
               "What is the number in the image? Please only answer a single number in 0, 1, 2, 3, 4, 5, 6, 7, 8, 9.",
           "MNIST classification prompt");
  c.expect(classification_prompt(LabelSet(cifar10_labels()), DatasetKind::Object) ==
               "What is the object in the image? Please only answer a single object in airplane, automobile, bird, "
               "cat, deer, dog, frog, horse, ship, truck.",
           "CIFAR-10 classification prompt");
  for (const auto& labels : {mnist_labels(), cifar10_labels()})
    for (const auto& l : labels) {
      const std::string pred = "The object is a(n) " + l + ".";
      c.expect(judge_prompt(l, pred) ==
                   "Please only answer the question in yes or no. Is the \"Prediction\" correctly predicting the "
                   "right \"Label\"? Label: " + l + "; Prediction: " + pred + ".",
               "judge prompt for " + l);
    }
  const auto r = finetune_record("airplane/2604.jpg", "airplane");
  c.expect(r.image == "airplane/2604.jpg", "finetune image");
  c.expect(r.human_turn == "What is the object in the image? <image>", "finetune human turn");
  c.expect(r.model_turn == "The object is a(n) airplane.", "finetune gpt turn");
  c.expect(serialize_finetune_record(r) ==
               R"({"image":"airplane/2604.jpg","conversations":[{"from":"human","value":"What is the object in the image? <image>"},{"from":"gpt","value":"The object is a(n) airplane."}]})",
           "finetune record serialization");
}

// 2 ----------------------------------------------------------------------
void verdict_taxonomy(Checks& c) {
  auto grade = [](std::size_t truth, const LabelSet& labels, const std::string& out, std::optional<bool> judge) {
    return classify_verdict(truth, labels, out, rule_match(out, labels), judge);
  };
  const LabelSet mnist(mnist_labels()), c10(cifar10_labels()), c100(cifar100_labels());
  c.expect(grade(0, mnist, "The number in the image is 8", std::nullopt) == Verdict::Incorrect,
           "\"The number in the image is 8\" vs 0");
  c.expect(grade(*c10.find("horse"), c10, "airplane, automobile, bird, cat, deer, dog, frog, horse,", std::nullopt) ==
               Verdict::IntrinsicHallucination,
           "LENS multi-label output");
  c.expect(grade(*c100.find("aquarium_fish"), c100, "a picture of a fish in a tank", false) ==
               Verdict::ExtrinsicHallucination,
           "fish in a tank, judge no");
  c.expect(grade(*c10.find("airplane"), c10, "The airplane is 8.", false) == Verdict::ExtrinsicHallucination,
           "\"The airplane is 8.\", judge no");
}

// 3 ----------------------------------------------------------------------
void embedding_oracle(Checks& c) {
  Rng rng(2024);
  EmbeddingTable t;
  std::vector<std::string> names;
  for (int i = 0; i < 50; ++i) names.push_back("label_" + std::to_string(i));
  t.labels = LabelSet(names);
  t.vectors = Matrix(50, 16);
  std::vector<std::vector<double>> rows(50, std::vector<double>(16));
  for (std::size_t r = 0; r < 50; ++r)
    for (std::size_t k = 0; k < 16; ++k) rows[r][k] = t.vectors(r, k) = rng.normal();
  int agree = 0;
  for (int q = 0; q < 200; ++q) {
    std::vector<double> v(16);
    for (auto& x : v) x = rng.normal();
    if (embed_match(v, t).label == oracle::nearest_row(v, rows)) ++agree;
  }
  c.expect(agree == 200, "agreement " + std::to_string(agree) + "/200");

  // constructed ties: exact equidistance and duplicate rows
  EmbeddingTable tie;
  tie.labels = LabelSet({"a", "b", "c", "d"});
  tie.vectors = Matrix(4, 16);
  tie.vectors(0, 2) = 5.0;
  tie.vectors(1, 0) = 2.0;
  tie.vectors(2, 1) = 2.0;
  tie.vectors(3, 0) = 2.0;  // duplicate of row 1
  std::vector<double> mid(16, 0.0);
  mid[0] = 1.0;
  mid[1] = 1.0;  // distance^2 = 2 to rows 1, 2 and 3
  c.expect(embed_match(mid, tie).label == 1, "tie between 1, 2, 3 goes to 1");
  std::vector<double> near3(16, 0.0);
  near3[0] = 2.0;
  c.expect(embed_match(near3, tie).label == 1, "duplicate rows go to the lower index");
  std::vector<double> q02(16, 0.0);
  q02[1] = 1.0;
  q02[2] = 2.5;  // distance^2 = 7.25 to rows 0 and 2
  c.expect(embed_match(q02, tie).label == 0, "tie between 0 and 2 goes to 0");
}

// 4 ----------------------------------------------------------------------
void balanced_geometry(Checks& c) {
  const lab::LayerPeeledProblem prob{4, 8, 0, 1, 1, 1.0, 1.0};
  const auto r = lab::solve_layer_peeled(prob, lab::SolverOptions{});
  const auto m = lab::collapse_metrics(r.state, 0);
  double worst = 0.0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      if (i != j) worst = std::max(worst, std::abs(m.cosines(i, j) + 1.0 / 3.0));
  c.expect(worst <= 0.05, "max |cos + 1/3| = " + fmt("%.3g", worst));

  Rng rng(77);
  double grad_err = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Matrix W(4, 8), H(4, 8);
    for (auto& v : W.values()) v = rng.normal();
    for (auto& v : H.values()) v = rng.normal();
    const auto g = lab::objective_gradient(prob, lab::reduced_state(W, H));
    const std::vector<double> w(W.values().begin(), W.values().end()), h(H.values().begin(), H.values().end());
    const std::vector<std::int64_t> n(4, 1);
    const auto nW = oracle::finite_difference([&](const std::vector<double>& x) { return oracle::layer_peeled_objective(x, h, 4, 8, n); }, w);
    const auto nH = oracle::finite_difference([&](const std::vector<double>& x) { return oracle::layer_peeled_objective(w, x, 4, 8, n); }, h);
    grad_err = std::max({grad_err, oracle::max_relative_error(g.grad_W.values(), nW),
                         oracle::max_relative_error(g.grad_H.values(), nH)});
  }
  c.expect(grad_err < 1e-5, "gradient check relative error " + fmt("%.3g", grad_err));
}

// 5 ----------------------------------------------------------------------
void minority_collapse(Checks& c) {
  const lab::LayerPeeledProblem base{10, 10, 5, 1, 1, 1.0, 1.0};
  const double ratios[] = {1, 10, 100, 1000};
  const auto rows = lab::imbalance_sweep(base, ratios, lab::SolverOptions{});
  std::vector<double> cosines;
  for (const auto& row : rows) {
    if (!row.metrics || !row.metrics->minority_mean_cosine) {
      c.expect(false, "ratio " + fmt("%g", row.ratio) + " failed: " + row.error);
      return;
    }
    cosines.push_back(*row.metrics->minority_mean_cosine);
  }
  for (std::size_t i = 1; i < cosines.size(); ++i)
    c.expect(cosines[i] >= cosines[i - 1] - 0.02,
             "minority cosine drops from " + fmt("%.4f", cosines[i - 1]) + " to " + fmt("%.4f", cosines[i]));
  c.expect(cosines.back() >= 0.9, "final minority cosine " + fmt("%.4f", cosines.back()));
  c.expect(rows[0].metrics->etf_deviation < 0.05, "ratio-1 etf_deviation " + fmt("%.3g", rows[0].metrics->etf_deviation));
}

// 6 ----------------------------------------------------------------------
void figure2_shape(Checks& c) {
  const lab::ToyTrainConfig cfg;
  const auto cmp = lab::reinit_variants(cfg);
  const auto& b = cmp.baseline;
  const auto boundary = static_cast<std::size_t>(b.phase_boundary);
  double phase1 = 0.0;
  for (std::size_t e = 0; e < boundary; ++e) phase1 = std::max(phase1, b.pretrain_acc[e]);
  c.expect(phase1 >= 0.95, "phase-1 pretrain accuracy " + fmt("%.3f", phase1));
  double early = 1.0;
  for (std::size_t e = boundary; e < boundary + 5 && e < b.epochs(); ++e) early = std::min(early, b.pretrain_acc[e]);
  c.expect(early <= 0.10, "pretrain accuracy within 5 fine-tune epochs " + fmt("%.3f", early));
  double gap = 0.0;
  for (std::size_t e = 0; e < b.epochs(); ++e)
    gap = std::max(gap, std::abs(cmp.reinit_optimizer.pretrain_acc[e] - b.pretrain_acc[e]));
  c.expect(gap < 0.1, "reinit_optimizer max gap " + fmt("%.3f", gap));
  const double rc = cmp.reinit_classifier.min_phase2_pretrain_acc(), bl = b.min_phase2_pretrain_acc();
  c.expect(rc >= bl - 0.02, "reinit_classifier min " + fmt("%.3f", rc) + " vs baseline " + fmt("%.3f", bl));
}

// 7 ----------------------------------------------------------------------
void adapter_direction(Checks& c) {
  double lin = 0.0, lora = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    lab::AdapterSimConfig cfg;
    cfg.seed = seed;
    cfg.mode = lab::AdapterMode::Linear;
    const auto l = lab::adapter_sim(cfg);
    c.expect(l.head_digest_before == l.head_digest_after, "linear head changed for seed " + std::to_string(seed));
    lin += l.task_b_drop(3);
    cfg.mode = lab::AdapterMode::Lora;
    lora += lab::adapter_sim(cfg).task_b_drop(3);
  }
  lin /= 5;
  lora /= 5;
  c.expect(lora >= lin, "mean task-B drop lora " + fmt("%.3f", lora) + " < linear " + fmt("%.3f", lin));
}

// 8 ----------------------------------------------------------------------
void forgetting_signature(Checks& c) {
  TempDir dir;
  const std::vector<std::string> a_labels{"airplane", "automobile", "bird", "cat", "deer"};
  const std::vector<std::string> b_labels{"dog", "frog", "horse", "ship", "truck"};
  // B images carry the A-label the fine-tuned model answers with
  const std::vector<std::string> answer{"cat", "bird", "deer", "airplane", "automobile"};
  const auto ma = write_image_manifest(dir.path(), "taskA", a_labels, 20);
  const auto mb = write_image_manifest(dir.path(), "taskB", b_labels, 20, answer);

  json base_rules = json::array();
  base_rules.push_back(
      {{"match", {{"has_image", true}, {"image_regex", "LABEL=([A-Za-z_]+);"}}}, {"reply", "The object is a(n) $1."}});
  MockServer base_mock(MockScript::parse(base_rules.dump()));
  MockServer ft_mock(MockScript::parse(label_echo_script()));
  base_mock.start();
  ft_mock.start();

  std::ostringstream log;
  auto base = run_config_from_json(run_config_json({ma, mb}, base_mock.base_url(), "base"), dir.path());
  base.out_dir = dir / "base";
  auto ft = run_config_from_json(run_config_json({ma, mb}, ft_mock.base_url(), "finetuned"), dir.path());
  ft.out_dir = dir / "ft";
  c.expect(cmd_eval(base, log) == 0, "base eval failed: " + log.str());
  c.expect(cmd_eval(ft, log) == 0, "fine-tuned eval failed: " + log.str());
  ReportOptions ro;
  ro.base = "base";
  ro.top_k = 3;
  c.expect(cmd_report({base.out_dir, ft.out_dir}, dir / "report", ro, log) == 0, "report failed: " + log.str());
  if (!c.failures.empty()) return;

  const auto acc = parse_accuracy_csv(read_text(dir / "report" / kAccuracyFile));
  c.expect(acc.at("finetuned").at("taskA").str() == "100.00%", "task-A accuracy " + acc.at("finetuned").at("taskA").str());
  c.expect(acc.at("finetuned").at("taskB").str() == "0.00%", "task-B accuracy " + acc.at("finetuned").at("taskB").str());

  // verdicts on B are Incorrect or Extrinsic only
  const auto recs = load_records(ft.out_dir / kRecordsFile);
  int b_total = 0, b_wrong = 0;
  for (const auto& r : recs)
    if (r.dataset == "taskB") {
      ++b_total;
      b_wrong += r.verdict == Verdict::Incorrect || r.verdict == Verdict::ExtrinsicHallucination;
    }
  c.expect(b_total == 20 && b_wrong == b_total, "task-B verdicts not all Incorrect/Extrinsic");

  // top-3 on B concentrated on A labels
  const LabelSet a_set(a_labels);
  std::vector<RunRecord> b_recs;
  for (const auto& r : recs)
    if (r.dataset == "taskB") b_recs.push_back(r);
  std::vector<RunRecord> all_recs = load_records(base.out_dir / kRecordsFile);
  all_recs.insert(all_recs.end(), recs.begin(), recs.end());
  const auto vocab = truth_vocabulary(all_recs);
  for (const auto& row : top_k_distribution(b_recs, 3, &vocab)) {
    const auto& top = row.entries.front();
    c.expect(a_set.find(top.prediction).has_value(), "top prediction for " + row.truth + " is " + top.prediction);
    c.expect(top.percent.str() == "100.00%", "top prediction share for " + row.truth + " is " + top.percent.str());
  }
  const auto topk = read_text(dir / "report" / kTopKFile);
  c.expect(topk.find("finetuned,taskB,dog,4,1,cat,4,100.00%") != std::string::npos, "topk.csv row for dog");

  // gap = sum over datasets of (base - model), from the accuracy table by hand
  std::int64_t hand = 0;
  for (const auto& [dataset, pct] : acc.at("base")) hand += pct.centi - acc.at("finetuned").at(dataset).centi;
  const auto gaps = read_text(dir / "report" / kGapFile);
  const auto want = "finetuned,base,0.00,100.00," + Percent{hand}.digits() + "\n";
  c.expect(hand > 0, "total gap not positive");
  c.expect(gaps.find(want) != std::string::npos, "gaps.csv: " + gaps);
}

// 9 ----------------------------------------------------------------------
void metrics_arithmetic(Checks& c) {
  std::vector<RunRecord> recs;
  auto add = [&](const std::string& out, int n) {
    for (int i = 0; i < n; ++i) {
      RunRecord r;
      char id[32];
      std::snprintf(id, sizeof id, "miniImagenet/%06zu", recs.size());
      r.id = id;
      r.dataset = "miniImagenet";
      r.model = "llava-ft-cifar10";
      r.truth = "African_hunting_dog";
      r.output = out;
      r.verdict = Verdict::Incorrect;
      recs.push_back(r);
    }
  };
  add("The object is a(n) dog.", 41);
  add("The object is a(n) deer.", 16);
  add("The object is a(n) bird.", 4);
  add("The object is a(n) cat.", 2);
  add("The object is a(n) horse.", 2);
  add("The object is an airplane.", 1);
  const LabelSet vocab(cifar10_labels());
  const auto rows = top_k_distribution(recs, 3, &vocab);
  c.expect(rows.size() == 1 && rows[0].total == 66, "fixture has 66 records");
  if (!c.failures.empty()) return;
  const auto& e = rows[0].entries;
  std::string got;
  for (const auto& x : e) got += x.prediction + ": " + x.percent.str() + ", ";
  c.expect(got == "dog: 62.12%, deer: 24.24%, bird: 6.06%, ", "top-3 row: " + got);

  std::vector<RunRecord> many;
  for (int i = 0; i < 10000; ++i) {
    RunRecord r;
    char id[32];
    std::snprintf(id, sizeof id, "d/%06d", i);
    r.id = id;
    r.dataset = "d";
    r.model = "m";
    r.truth = "x";
    r.verdict = i < 5696 ? Verdict::Correct : Verdict::Incorrect;
    many.push_back(r);
  }
  const auto csv = accuracy_csv(build_report(many));
  c.expect(csv == "checkpoint,d\nm,56.96%\n", "accuracy cell: " + csv);
}

// 10 ---------------------------------------------------------------------
void robustness(Checks& c) {
  TempDir dir;
  const auto ma = write_image_manifest(dir.path(), "taskA", cifar10_labels(), 24);
  const char* report_files[] = {kAccuracyFile, kVerdictsFile, kTopKFile};

  // reference run
  MockServer ref_mock(MockScript::parse(label_echo_script()));
  ref_mock.start();
  std::ostringstream log;
  auto ref = run_config_from_json(run_config_json({ma}, ref_mock.base_url(), "m", 3), dir.path());
  ref.out_dir = dir / "ref";
  c.expect(cmd_eval(ref, log) == 0, "reference eval failed");

  // interrupted by a server that keeps failing one item, then resumed
  json rules = json::array();
  rules.push_back({{"match", {{"has_image", true}, {"image_regex", "LABEL=([A-Za-z_]+);N=7;"}}},
                   {"reply", "The object is a(n) $1."},
                   {"status_sequence", {503, 503, 503, 503}}});
  for (const auto& r : json::parse(label_echo_script())) rules.push_back(r);
  MockServer flaky(MockScript::parse(rules.dump()));
  flaky.start();
  auto run = run_config_from_json(run_config_json({ma}, flaky.base_url(), "m", 3, 1), dir.path());
  run.out_dir = dir / "interrupted";
  c.expect(cmd_eval(run, log) == 1, "first run should fail on the flaky item");
  c.expect(load_records(run.out_dir / kRecordsFile).size() == 23, "partial records not kept");
  run.resume = true;
  cmd_eval(run, log);  // second failure of the same item is allowed
  const int rc = cmd_eval(run, log);
  c.expect(rc == 0, "resumed run exit " + std::to_string(rc));
  for (const char* f : report_files)
    c.expect(read_text(run.out_dir / f) == read_text(ref.out_dir / f), std::string(f) + " differs after resume");

  // killed mid-write: torn last line and missing tail, then resume from the cache
  auto torn = run_config_from_json(run_config_json({ma}, ref_mock.base_url(), "m", 3), dir.path());
  torn.out_dir = dir / "torn";
  torn.cache_dir = ref.effective_cache_dir();
  c.expect(cmd_eval(torn, log) == 0, "cached run failed");
  auto text = read_text(torn.out_dir / kRecordsFile);
  std::size_t cut = 0;
  for (int lines = 0; lines < 10; ++lines) cut = text.find('\n', cut) + 1;
  write_text(torn.out_dir / kRecordsFile, text.substr(0, cut + 25));
  for (const char* f : report_files) fs::remove(torn.out_dir / f);
  const int before = ref_mock.stats().requests;
  torn.resume = true;
  std::ostringstream torn_log;
  const int torn_rc = cmd_eval(torn, torn_log);
  c.expect(torn_rc == 0, "resume after torn write failed: " + torn_log.str());
  c.expect(ref_mock.stats().requests == before, "resume went to the network instead of the cache");
  for (const char* f : report_files)
    c.expect(read_text(torn.out_dir / f) == read_text(ref.out_dir / f), std::string(f) + " differs after torn resume");

  // concurrency bound
  MockServer slow(MockScript::parse(label_echo_script(30)));
  slow.start();
  auto par = run_config_from_json(run_config_json({ma}, slow.base_url(), "m", 3), dir.path());
  par.out_dir = dir / "par";
  c.expect(cmd_eval(par, log) == 0, "slow eval failed");
  const auto st = slow.stats();
  c.expect(st.max_in_flight <= 3, "max in flight " + std::to_string(st.max_in_flight) + " > 3");
  c.expect(st.chat_requests == 24, "expected 24 requests, saw " + std::to_string(st.chat_requests));
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<void(Checks&)> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "prompt goldens", 1.0, prompt_goldens},
      {2, "verdict taxonomy", 1.0, verdict_taxonomy},
      {3, "embedding-match oracle", 5.0, embedding_oracle},
      {4, "layer-peeled balanced geometry", 30.0, balanced_geometry},
      {5, "minority collapse trend", 300.0, minority_collapse},
      {6, "two-phase forgetting curve shape", 120.0, figure2_shape},
      {7, "adapter vs low-rank forgetting", 120.0, adapter_direction},
      {8, "end-to-end forgetting signature", 30.0, forgetting_signature},
      {9, "metrics arithmetic", 1.0, metrics_arithmetic},
      {10, "resume and concurrency", 60.0, robustness},
  };
  int failed = 0;
  for (const auto& cr : criteria) {
    Checks checks;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      cr.run(checks);
    } catch (const std::exception& e) {
      checks.failures.push_back(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > cr.budget_s) checks.failures.push_back("took " + fmt("%.2f", secs) + " s, budget " + fmt("%.0f", cr.budget_s) + " s");
    const bool ok = checks.failures.empty();
    failed += !ok;
    std::printf("%s criterion %d: %s (%.2f s)\n", ok ? "PASS" : "FAIL", cr.id, cr.name, secs);
    for (const auto& f : checks.failures) std::printf("    %s\n", f.c_str());
    std::fflush(stdout);
  }
  return failed;
}
