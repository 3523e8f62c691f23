#include "emt/cli.hpp"

#include <pthread.h>
#include <signal.h>

#include <CLI11.hpp>
#include <algorithm>
#include <optional>

#include "emt/datasets.hpp"
#include "emt/kernels.hpp"
#include "emt/lab_commands.hpp"
#include "emt/mock_server.hpp"
#include "emt/pipeline.hpp"

namespace emt {

namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<int> parallelism;
  bool resume = false;
};

RunConfig harness_config(const Globals& g) {
  if (g.config.empty()) throw ConfigError("--config <file> is required");
  auto cfg = load_run_config(g.config);
  if (g.out) cfg.out_dir = *g.out;
  if (g.seed) cfg.eval_seed = *g.seed;
  if (g.parallelism) {
    cfg.endpoint.parallelism = *g.parallelism;
    if (cfg.judge_endpoint) cfg.judge_endpoint->parallelism = *g.parallelism;
  }
  cfg.resume = g.resume;
  return cfg;
}

fs::path lab_out(const Globals& g) { return g.out ? fs::path(*g.out) : fs::path("out"); }

void lab_threads(const Globals& g) {
  if (!g.parallelism) return;
  if (*g.parallelism < 1) throw ConfigError("--parallelism must be >= 1");
  kernels::set_num_threads(*g.parallelism);
}

int serve_until_signal(const std::string& script_path, int port, const std::string& host, std::ostream& out) {
  auto script = MockScript::load(script_path);
  // Block before the server threads exist so they inherit the mask and the
  // signal is only ever delivered to sigwait below.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  sigset_t old;
  pthread_sigmask(SIG_BLOCK, &set, &old);
  MockServer server(std::move(script));
  int bound = 0;
  try {
    bound = server.start(port, host);
  } catch (...) {
    pthread_sigmask(SIG_SETMASK, &old, nullptr);
    throw;
  }
  out << server.base_url() << std::endl;
  (void)bound;
  int sig = 0;
  sigwait(&set, &sig);
  server.stop();
  pthread_sigmask(SIG_SETMASK, &old, nullptr);
  const auto st = server.stats();
  out << "stopped: " << st.requests << " requests, max in flight " << st.max_in_flight << std::endl;
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Catastrophic-forgetting evaluation harness and collapse lab"};
  app.name("emt");
  app.require_subcommand(1);

  Globals g;
  app.add_option("--config", g.config, "Config file (JSON, schema_version 1)");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--seed", g.seed, "Seed: eval subsampling or lab RNG");
  app.add_option("--parallelism", g.parallelism, "In-flight requests, or OpenMP threads for lab commands");
  app.add_flag("--resume", g.resume, "Continue an interrupted eval from its records and cache");

  auto* eval = app.add_subcommand("eval", "Query the model on every manifest item and grade the outputs");
  eval->fallthrough();

  std::string records_path;
  std::optional<std::string> judge_strategy;
  auto* judge = app.add_subcommand("judge", "Re-grade stored outputs with the judge or embed strategy");
  judge->fallthrough();
  judge->add_option("--records", records_path, "records.jsonl or a run directory")->required();
  judge->add_option("--strategy", judge_strategy, "judge (default) or embed");

  std::vector<std::string> report_paths;
  std::optional<std::string> base, base_csv, topk_labels;
  int top_k = 3;
  auto* report = app.add_subcommand("report", "Accuracy matrix, verdicts, top-k tables and forgetting gaps");
  report->fallthrough();
  report->add_option("records", report_paths, "records.jsonl files or run directories")->required();
  report->add_option("--base", base, "Checkpoint the gaps are measured against");
  report->add_option("--base-csv", base_csv, "accuracy.csv holding the base row");
  report->add_option("--top-k", top_k, "Predictions listed per truth label")->check(CLI::PositiveNumber);
  report->add_option("--topk-labels", topk_labels, "Manifest whose labels bucket predictions");

  auto* collapse = app.add_subcommand("collapse", "Layer-peeled model experiments");
  collapse->fallthrough();
  collapse->require_subcommand(1);
  auto* solve = collapse->add_subcommand("solve", "Solve one problem and report its geometry");
  solve->fallthrough();
  auto* sweep = collapse->add_subcommand("sweep", "Solve across imbalance ratios");
  sweep->fallthrough();

  auto* forget = app.add_subcommand("forget-sim", "Two-phase class-split training run");
  forget->fallthrough();
  auto* adapter = app.add_subcommand("adapter-sim", "Adapter vs low-rank fine-tuning simulator");
  adapter->fallthrough();

  std::string script;
  int port = 0;
  std::string host = "127.0.0.1";
  auto* mock = app.add_subcommand("mock-serve", "Serve a scripted mock endpoint until SIGINT/SIGTERM");
  mock->fallthrough();
  mock->add_option("--script", script, "Mock script (JSON rule list)")->required();
  mock->add_option("--port", port, "Port, 0 picks a free one");
  mock->add_option("--host", host, "Bind address");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "emt: " << e.what() << "\n" << "run `emt --help` for usage\n";
    return 2;
  }

  try {
    if (*eval) return cmd_eval(harness_config(g), err);
    if (*judge) {
      auto cfg = harness_config(g);
      cfg.strategy.strategy = judge_strategy ? parse_strategy(*judge_strategy) : Strategy::Judge;
      return cmd_judge(cfg, records_path, err);
    }
    if (*report) {
      ReportOptions ro;
      ro.top_k = top_k;
      ro.base = base;
      if (base_csv) ro.base_csv = fs::path(*base_csv);
      if (topk_labels) ro.topk_vocabulary = load_manifest(*topk_labels).labels;
      std::vector<fs::path> paths(report_paths.begin(), report_paths.end());
      return cmd_report(paths, lab_out(g), ro, err);
    }
    if (*collapse) {
      CollapseConfig cfg;
      if (!g.config.empty()) cfg = collapse_config_from_json(load_json_file(g.config));
      if (g.seed) cfg.solver.seed = *g.seed;
      lab_threads(g);
      return *solve ? cmd_collapse_solve(cfg, lab_out(g), out) : cmd_collapse_sweep(cfg, lab_out(g), out);
    }
    if (*forget) {
      ForgetSimConfig cfg;
      if (!g.config.empty()) cfg = forget_config_from_json(load_json_file(g.config));
      if (g.seed) cfg.toy.seed = cfg.toy.data.seed = *g.seed;
      lab_threads(g);
      return cmd_forget_sim(cfg, lab_out(g), out);
    }
    if (*adapter) {
      AdapterSimCommandConfig cfg;
      if (!g.config.empty()) cfg = adapter_config_from_json(load_json_file(g.config));
      if (g.seed) cfg.sim.seed = *g.seed;
      lab_threads(g);
      return cmd_adapter_sim(cfg, lab_out(g), out);
    }
    if (*mock) return serve_until_signal(script, port, host, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const MockScriptError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace emt
