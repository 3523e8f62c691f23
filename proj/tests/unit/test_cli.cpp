#include <doctest.h>

#include <chrono>
#include <sstream>

#include "emt/cli.hpp"
#include "emt/curve_data.hpp"
#include "emt/lab_commands.hpp"
#include "emt/pipeline.hpp"
#include "support.hpp"

using namespace emt;
using namespace emt::testing;
using json = nlohmann::json;

namespace {

int run(const std::vector<std::string>& args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int rc = run_cli(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return rc;
}

}  // namespace

TEST_CASE("usage errors exit 2, help exits 0") {
  std::string out, err;
  CHECK(run({"--help"}, &out) == 0);
  CHECK(out.find("forget-sim") != std::string::npos);
  CHECK(run({}, nullptr, &err) == 2);
  CHECK(run({"frobnicate"}) == 2);
  CHECK(run({"collapse"}) == 2);
  CHECK(run({"eval"}, nullptr, &err) == 2);
  CHECK(err.find("--config") != std::string::npos);
}

TEST_CASE("collapse solve: demo config converges, p < K is rejected") {
  TempDir dir;
  std::string out, err;
  REQUIRE(run({"collapse", "solve", "--out", (dir / "s").string()}, &out) == 0);
  const auto summary = json::parse(read_text(dir / "s" / kSummaryFile));
  CHECK(summary["converged"] == true);
  CHECK(summary["metrics"]["etf_deviation"].get<double>() < 0.05);
  CHECK(fs::exists(dir / "s" / kCurvesFile));

  write_text(dir / "bad.json", R"({"schema_version":1,"problem":{"classes":10,"dim":4}})");
  CHECK(run({"--config", (dir / "bad.json").string(), "collapse", "solve", "--out", (dir / "b").string()}, &out) == 2);
  CHECK(out.find("p >= K") != std::string::npos);
  write_text(dir / "v2.json", R"({"schema_version":2})");
  CHECK(run({"--config", (dir / "v2.json").string(), "collapse", "solve"}, &out, &err) == 2);
  CHECK(run({"--config", (dir / "absent.json").string(), "collapse", "solve"}) == 2);
}

TEST_CASE("collapse sweep writes one row per ratio") {
  TempDir dir;
  write_text(dir / "c.json",
             R"({"schema_version":1,"problem":{"classes":4,"dim":4,"majority_classes":2},"ratios":[1,5,25]})");
  REQUIRE(run({"--config", (dir / "c.json").string(), "collapse", "sweep", "--out", (dir / "o").string()}) == 0);
  const auto csv = read_text(dir / "o" / kSweepFile);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  const auto curves = parse_curve_csv(read_text(dir / "o" / kCurvesFile));
  CHECK(curves.values("minority_mean_cosine").size() == 3);
  write_text(dir / "n.json", R"({"schema_version":1,"problem":{"classes":4,"dim":4}})");
  CHECK(run({"--config", (dir / "n.json").string(), "collapse", "sweep", "--out", (dir / "n").string()}) == 2);
}

TEST_CASE("forget-sim: row count and same seed twice gives identical files") {
  TempDir dir;
  write_text(dir / "f.json",
             R"({"schema_version":1,"toy":{"data":{"per_class":20},"pretrain_epochs":3,"finetune_epochs":2}})");
  const auto cfg = (dir / "f.json").string();
  REQUIRE(run({"--config", cfg, "--seed", "5", "forget-sim", "--out", (dir / "a").string()}) == 0);
  REQUIRE(run({"--config", cfg, "--seed", "5", "forget-sim", "--out", (dir / "b").string()}) == 0);
  REQUIRE(run({"--config", cfg, "--seed", "6", "forget-sim", "--out", (dir / "c").string()}) == 0);
  const auto a = read_text(dir / "a" / kCurvesFile);
  CHECK(a == read_text(dir / "b" / kCurvesFile));
  CHECK(read_text(dir / "a" / kSummaryFile) == read_text(dir / "b" / kSummaryFile));
  CHECK(a != read_text(dir / "c" / kCurvesFile));
  const auto d = parse_curve_csv(a);
  CHECK(d.points.size() == 5 * 3);  // epochs x series
  CHECK(json::parse(read_text(dir / "a" / kSummaryFile))["config"]["toy"]["seed"] == 5);
}

TEST_CASE("adapter-sim writes both modes") {
  TempDir dir;
  write_text(dir / "a.json", R"({"schema_version":1,"adapter":{"finetune_epochs":2},"modes":["linear","lora"]})");
  REQUIRE(run({"--config", (dir / "a.json").string(), "adapter-sim", "--out", (dir / "o").string(),
               "--parallelism", "1"}) == 0);
  const auto d = parse_curve_csv(read_text(dir / "o" / kCurvesFile));
  CHECK(d.series() == std::vector<std::string>{"linear/task_a", "linear/task_b", "lora/task_a", "lora/task_b"});
  CHECK(d.points.size() == 3 * 4);  // epochs 0..2
  const auto s = json::parse(read_text(dir / "o" / kSummaryFile));
  CHECK(s["runs"]["linear"]["head_digest_before"] == s["runs"]["linear"]["head_digest_after"]);
}

TEST_CASE("forget-sim and adapter-sim default configs finish within a minute") {
  TempDir dir;
  for (const char* cmd : {"forget-sim", "adapter-sim"}) {
    const auto t0 = std::chrono::steady_clock::now();
    CHECK(run({cmd, "--out", (dir / cmd).string()}) == 0);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(secs < 60.0);
  }
}

TEST_CASE("eval, judge and report through the command line") {
  TempDir dir;
  const auto m = write_image_manifest(dir.path(), "taskA", {"cat", "dog"}, 6);
  auto rules = json::parse(label_echo_script());
  for (const auto& r : judge_rules()) rules.push_back(r);
  MockServer server(MockScript::parse(rules.dump()));
  server.start();
  auto j = run_config_json({m}, server.base_url(), "m");
  j["judge_endpoint"] = endpoint_json(server.base_url(), "judge");
  write_text(dir / "run.json", j.dump());
  const auto cfg = (dir / "run.json").string();
  const auto out = (dir / "out").string();
  REQUIRE(run({"--config", cfg, "--out", out, "--parallelism", "2", "eval"}) == 0);
  CHECK(read_text(dir / "out" / kAccuracyFile) == "checkpoint,taskA\nm,100.00%\n");
  REQUIRE(run({"--config", cfg, "--out", out, "--resume", "eval"}) == 0);
  REQUIRE(run({"--config", cfg, "--out", (dir / "j").string(), "judge", "--records", out}) == 0);
  CHECK(read_text(dir / "j" / kRecordsFile).find("\"judge_text\":\"Yes.\"") != std::string::npos);
  REQUIRE(run({"--out", (dir / "r").string(), "report", out, "--top-k", "1"}) == 0);
  CHECK(read_text(dir / "r" / kTopKFile).find("m,taskA,cat,3,1,cat,3,100.00%") != std::string::npos);
  CHECK(run({"report"}) == 2);
  CHECK(run({"--config", cfg, "judge", "--records", out, "--strategy", "embed"}) == 2);
}
