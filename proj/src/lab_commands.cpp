#include "emt/lab_commands.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "emt/curve_data.hpp"
#include "emt/pipeline.hpp"

namespace emt {

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace emt::lab;

namespace {

void write_file(const fs::path& path, std::string_view text) {
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out.flush()) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string_view backend_name(kernels::Backend b) {
  return b == kernels::Backend::Parallel ? "parallel" : "serial";
}

kernels::Backend parse_backend(const std::string& s) {
  if (s == "serial") return kernels::Backend::Serial;
  if (s == "parallel") return kernels::Backend::Parallel;
  throw ConfigError("unknown backend \"" + s + "\" (serial, parallel)");
}

void check_version(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const int v = j.value("schema_version", 0);
  if (v != kConfigSchemaVersion)
    throw ConfigError("config schema_version must be " + std::to_string(kConfigSchemaVersion) + ", got " +
                      std::to_string(v));
}

template <typename F>
auto guarded(F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

LayerPeeledProblem problem_from_json(const json& j, LayerPeeledProblem p) {
  p.classes = j.value("classes", p.classes);
  p.dim = j.value("dim", p.dim);
  p.majority_classes = j.value("majority_classes", p.majority_classes);
  p.n_majority = j.value("n_majority", p.n_majority);
  p.n_minority = j.value("n_minority", p.n_minority);
  p.w_budget = j.value("w_budget", p.w_budget);
  p.h_budget = j.value("h_budget", p.h_budget);
  return p;
}

SolverOptions solver_from_json(const json& j, SolverOptions o) {
  o.lr = j.value("lr", o.lr);
  o.iters = j.value("iters", o.iters);
  o.seed = j.value("seed", o.seed);
  o.tol = j.value("tol", o.tol);
  o.window = j.value("window", o.window);
  o.restarts = j.value("restarts", o.restarts);
  o.backtracking = j.value("backtracking", o.backtracking);
  if (j.contains("backend")) o.backend = parse_backend(j["backend"].get<std::string>());
  return o;
}

json metrics_json(const CollapseMetrics& m) {
  json cos = json::array();
  for (std::size_t r = 0; r < m.cosines.rows(); ++r) {
    const auto row = m.cosines.row(r);
    cos.push_back(std::vector<double>(row.begin(), row.end()));
  }
  json j{{"pairwise_cosines", cos}, {"etf_deviation", m.etf_deviation}};
  auto opt = [&](const char* key, const std::optional<double>& v) { j[key] = v ? json(*v) : json(nullptr); };
  opt("minority_mean_cosine", m.minority_mean_cosine);
  opt("minority_max_pair_distance", m.minority_max_pair_distance);
  opt("majority_mean_cosine", m.majority_mean_cosine);
  opt("within_class_variability", m.within_class_variability);
  return j;
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : ""; }

}  // namespace

json to_json(const LayerPeeledProblem& p) {
  return {{"classes", p.classes},       {"dim", p.dim},           {"majority_classes", p.majority_classes},
          {"n_majority", p.n_majority}, {"n_minority", p.n_minority}, {"w_budget", p.w_budget},
          {"h_budget", p.h_budget}};
}

json to_json(const SolverOptions& o) {
  return {{"lr", o.lr},           {"iters", o.iters},       {"seed", o.seed},
          {"tol", o.tol},         {"window", o.window},     {"restarts", o.restarts},
          {"backtracking", o.backtracking}, {"backend", std::string(backend_name(o.backend))}};
}

json to_json(const ToyTrainConfig& c) {
  return {{"data",
           {{"classes", c.data.classes},
            {"dim", c.data.dim},
            {"per_class", c.data.per_class},
            {"separation", c.data.separation},
            {"noise_sigma", c.data.noise_sigma},
            {"seed", c.data.seed}}},
          {"hidden", c.hidden},
          {"activation", std::string(to_string(c.activation))},
          {"pretrain_epochs", c.pretrain_epochs},
          {"finetune_epochs", c.finetune_epochs},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"lr_decay_factor", c.lr_decay_factor},
          {"lr_decay_period", c.lr_decay_period},
          {"batch_size", c.batch_size},
          {"pretrain_fraction", c.pretrain_fraction},
          {"mask", std::string(to_string(c.mask))},
          {"reinit_classifier", c.reinit_classifier},
          {"reinit_optimizer", c.reinit_optimizer},
          {"seed", c.seed},
          {"backend", std::string(backend_name(c.backend))}};
}

json to_json(const AdapterSimConfig& c) {
  return {{"input_dim", c.input_dim},
          {"encoder_dim", c.encoder_dim},
          {"text_dim", c.text_dim},
          {"query_dim", c.query_dim},
          {"head_hidden", c.head_hidden},
          {"classes_a", c.classes_a},
          {"classes_b", c.classes_b},
          {"per_class", c.per_class},
          {"separation", c.separation},
          {"noise_sigma", c.noise_sigma},
          {"shared_inputs", c.shared_inputs},
          {"mode", std::string(to_string(c.mode))},
          {"lora_rank", c.lora_rank},
          {"pretrain_epochs", c.pretrain_epochs},
          {"finetune_epochs", c.finetune_epochs},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"backend", std::string(backend_name(c.backend))}};
}

json to_json(const CollapseConfig& c) {
  return {{"schema_version", kConfigSchemaVersion},
          {"problem", to_json(c.problem)},
          {"solver", to_json(c.solver)},
          {"ratios", c.ratios}};
}

json to_json(const ForgetSimConfig& c) {
  return {{"schema_version", kConfigSchemaVersion}, {"toy", to_json(c.toy)}, {"variants", c.variants}};
}

json to_json(const AdapterSimCommandConfig& c) {
  json modes = json::array();
  for (auto m : c.modes) modes.push_back(std::string(to_string(m)));
  return {{"schema_version", kConfigSchemaVersion}, {"adapter", to_json(c.sim)}, {"modes", modes}};
}

CollapseConfig collapse_config_from_json(const json& j) {
  check_version(j);
  return guarded([&] {
    CollapseConfig c;
    if (j.contains("problem")) c.problem = problem_from_json(j["problem"], c.problem);
    if (j.contains("solver")) c.solver = solver_from_json(j["solver"], c.solver);
    if (j.contains("ratios")) c.ratios = j["ratios"].get<std::vector<double>>();
    return c;
  });
}

ForgetSimConfig forget_config_from_json(const json& j) {
  check_version(j);
  return guarded([&] {
    ForgetSimConfig c;
    c.variants = j.value("variants", c.variants);
    if (!j.contains("toy")) return c;
    const auto& t = j["toy"];
    auto& cfg = c.toy;
    if (t.contains("data")) {
      const auto& d = t["data"];
      cfg.data.classes = d.value("classes", cfg.data.classes);
      cfg.data.dim = d.value("dim", cfg.data.dim);
      cfg.data.per_class = d.value("per_class", cfg.data.per_class);
      cfg.data.separation = d.value("separation", cfg.data.separation);
      cfg.data.noise_sigma = d.value("noise_sigma", cfg.data.noise_sigma);
      cfg.data.seed = d.value("seed", cfg.data.seed);
    }
    cfg.hidden = t.value("hidden", cfg.hidden);
    if (t.contains("activation")) cfg.activation = parse_activation(t["activation"].get<std::string>());
    cfg.pretrain_epochs = t.value("pretrain_epochs", cfg.pretrain_epochs);
    cfg.finetune_epochs = t.value("finetune_epochs", cfg.finetune_epochs);
    cfg.lr = t.value("lr", cfg.lr);
    cfg.momentum = t.value("momentum", cfg.momentum);
    cfg.weight_decay = t.value("weight_decay", cfg.weight_decay);
    cfg.lr_decay_factor = t.value("lr_decay_factor", cfg.lr_decay_factor);
    cfg.lr_decay_period = t.value("lr_decay_period", cfg.lr_decay_period);
    cfg.batch_size = t.value("batch_size", cfg.batch_size);
    cfg.pretrain_fraction = t.value("pretrain_fraction", cfg.pretrain_fraction);
    if (t.contains("mask")) cfg.mask = parse_mask_mode(t["mask"].get<std::string>());
    cfg.reinit_classifier = t.value("reinit_classifier", cfg.reinit_classifier);
    cfg.reinit_optimizer = t.value("reinit_optimizer", cfg.reinit_optimizer);
    cfg.seed = t.value("seed", cfg.seed);
    if (t.contains("backend")) cfg.backend = parse_backend(t["backend"].get<std::string>());
    return c;
  });
}

AdapterSimCommandConfig adapter_config_from_json(const json& j) {
  check_version(j);
  return guarded([&] {
    AdapterSimCommandConfig c;
    if (j.contains("modes")) {
      c.modes.clear();
      for (const auto& m : j["modes"]) c.modes.push_back(parse_adapter_mode(m.get<std::string>()));
      if (c.modes.empty()) throw ConfigError("modes must list at least one of linear, lora");
    }
    if (!j.contains("adapter")) return c;
    const auto& a = j["adapter"];
    auto& s = c.sim;
    s.input_dim = a.value("input_dim", s.input_dim);
    s.encoder_dim = a.value("encoder_dim", s.encoder_dim);
    s.text_dim = a.value("text_dim", s.text_dim);
    s.query_dim = a.value("query_dim", s.query_dim);
    s.head_hidden = a.value("head_hidden", s.head_hidden);
    s.classes_a = a.value("classes_a", s.classes_a);
    s.classes_b = a.value("classes_b", s.classes_b);
    s.per_class = a.value("per_class", s.per_class);
    s.separation = a.value("separation", s.separation);
    s.noise_sigma = a.value("noise_sigma", s.noise_sigma);
    s.shared_inputs = a.value("shared_inputs", s.shared_inputs);
    if (a.contains("mode")) s.mode = parse_adapter_mode(a["mode"].get<std::string>());
    s.lora_rank = a.value("lora_rank", s.lora_rank);
    s.pretrain_epochs = a.value("pretrain_epochs", s.pretrain_epochs);
    s.finetune_epochs = a.value("finetune_epochs", s.finetune_epochs);
    s.lr = a.value("lr", s.lr);
    s.momentum = a.value("momentum", s.momentum);
    s.batch_size = a.value("batch_size", s.batch_size);
    s.seed = a.value("seed", s.seed);
    if (a.contains("backend")) s.backend = parse_backend(a["backend"].get<std::string>());
    return c;
  });
}

json load_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

int cmd_collapse_solve(const CollapseConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  try {
    cfg.problem.validate();
  } catch (const std::invalid_argument& e) {
    log << "config error: " << e.what() << '\n';
    return 2;
  }
  try {
    const auto res = solve_layer_peeled(cfg.problem, cfg.solver);
    const auto m = collapse_metrics(res.state, cfg.problem.majority_classes);
    fs::create_directories(out_dir);
    CurveData curve;
    curve.add_series("objective", res.trace);
    write_file(out_dir / kCurvesFile, curve_csv(curve));
    json summary{{"problem", to_json(cfg.problem)},
                 {"opts", to_json(cfg.solver)},
                 {"metrics", metrics_json(m)},
                 {"converged", res.converged},
                 {"final_objective", res.objective},
                 {"grad_norm", res.grad_norm},
                 {"iterations", res.iterations},
                 {"best_restart", res.best_restart}};
    write_file(out_dir / kSummaryFile, summary.dump(2) + "\n");
    log << "objective " << num(res.objective) << ", etf_deviation " << num(m.etf_deviation) << ", "
        << (res.converged ? "converged" : "NOT converged") << " after " << res.iterations
        << " iterations (projected-gradient norm " << num(res.grad_norm) << ")\n";
    return 0;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return 1;
  }
}

int cmd_collapse_sweep(const CollapseConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  std::vector<SweepRow> rows;
  try {
    cfg.problem.validate();
    if (cfg.ratios.empty()) throw std::invalid_argument("sweep needs at least one ratio");
    if (cfg.problem.majority_classes < 1 || cfg.problem.majority_classes >= cfg.problem.classes)
      throw std::invalid_argument("sweep needs 0 < majority_classes < classes");
    rows = imbalance_sweep(cfg.problem, cfg.ratios, cfg.solver);
  } catch (const std::invalid_argument& e) {
    log << "config error: " << e.what() << '\n';
    return 2;
  }
  try {
    fs::create_directories(out_dir);
    std::string csv =
        "ratio,n_majority,n_minority,objective,converged,etf_deviation,minority_mean_cosine,"
        "minority_max_pair_distance,majority_mean_cosine,error\n";
    CurveData curve;
    json table = json::array();
    bool failed = false;
    for (const auto& r : rows) {
      csv += num(r.ratio) + ',' + std::to_string(r.n_majority) + ',' + std::to_string(r.n_minority) + ',';
      json jr{{"ratio", r.ratio}, {"n_majority", r.n_majority}, {"n_minority", r.n_minority}};
      if (r.result && r.metrics) {
        const auto& m = *r.metrics;
        csv += num(r.result->objective) + ',' + (r.result->converged ? "true" : "false") + ',' +
               num(m.etf_deviation) + ',' + opt_num(m.minority_mean_cosine) + ',' +
               opt_num(m.minority_max_pair_distance) + ',' + opt_num(m.majority_mean_cosine) + ",\n";
        curve.add(r.ratio, "etf_deviation", m.etf_deviation);
        if (m.minority_mean_cosine) curve.add(r.ratio, "minority_mean_cosine", *m.minority_mean_cosine);
        jr["converged"] = r.result->converged;
        jr["final_objective"] = r.result->objective;
        jr["metrics"] = metrics_json(m);
      } else {
        failed = true;
        std::string err = r.error;
        for (char& c : err)
          if (c == ',' || c == '\n') c = ';';
        csv += ",,,,,," + err + '\n';
        jr["error"] = r.error;
      }
      table.push_back(jr);
    }
    write_file(out_dir / kSweepFile, csv);
    write_file(out_dir / kCurvesFile, curve_csv(curve));
    json summary{{"problem", to_json(cfg.problem)}, {"opts", to_json(cfg.solver)}, {"sweep", table}};
    write_file(out_dir / kSummaryFile, summary.dump(2) + "\n");
    log << csv;
    return failed ? 1 : 0;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return 1;
  }
}

int cmd_forget_sim(const ForgetSimConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  try {
    cfg.toy.validate();
  } catch (const std::invalid_argument& e) {
    log << "config error: " << e.what() << '\n';
    return 2;
  }
  auto run_summary = [](const ForgettingRun& r) {
    json j{{"pretrain_acc", r.pretrain_acc}, {"finetune_acc", r.finetune_acc}, {"loss", r.loss},
           {"phase_boundary", r.phase_boundary}};
    if (r.phase_boundary > 0) j["phase1_end_pretrain_acc"] = r.pretrain_acc[r.phase_boundary - 1];
    if (static_cast<std::size_t>(r.phase_boundary) < r.epochs())
      j["min_phase2_pretrain_acc"] = r.min_phase2_pretrain_acc();
    return j;
  };
  try {
    CurveData curve;
    json runs;
    if (cfg.variants) {
      const auto cmp = reinit_variants(cfg.toy);
      curve = cmp.curves();
      runs = {{"baseline", run_summary(cmp.baseline)},
              {"reinit_classifier", run_summary(cmp.reinit_classifier)},
              {"reinit_optimizer", run_summary(cmp.reinit_optimizer)}};
    } else {
      const auto run = train_toy(cfg.toy);
      run.append_curves(curve);
      runs = {{"run", run_summary(run)}};
    }
    fs::create_directories(out_dir);
    write_file(out_dir / kCurvesFile, curve_csv(curve));
    write_file(out_dir / kSummaryFile, json{{"config", to_json(cfg)}, {"runs", runs}}.dump(2) + "\n");
    for (const auto& [name, r] : runs.items()) {
      log << name << ": phase-1 end pretrain acc "
          << (r.contains("phase1_end_pretrain_acc") ? num(r["phase1_end_pretrain_acc"].get<double>()) : "-")
          << ", min phase-2 pretrain acc "
          << (r.contains("min_phase2_pretrain_acc") ? num(r["min_phase2_pretrain_acc"].get<double>()) : "-")
          << '\n';
    }
    return 0;
  } catch (const DivergenceError& e) {
    log << "error: " << e.what() << " after " << e.partial().epochs() << " epoch(s)\n";
    CurveData partial;
    e.partial().append_curves(partial);
    try {
      fs::create_directories(out_dir);
      write_file(out_dir / kCurvesFile, curve_csv(partial));
    } catch (const std::exception&) {
    }
    return 1;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return 1;
  }
}

int cmd_adapter_sim(const AdapterSimCommandConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  try {
    cfg.sim.validate();
    if (cfg.modes.empty()) throw std::invalid_argument("no adapter modes requested");
  } catch (const std::invalid_argument& e) {
    log << "config error: " << e.what() << '\n';
    return 2;
  }
  try {
    CurveData curve;
    json runs;
    for (auto mode : cfg.modes) {
      auto sim = cfg.sim;
      sim.mode = mode;
      const auto run = adapter_sim(sim);
      const std::string name(to_string(mode));
      run.append_curves(curve, name + "/");
      runs[name] = {{"task_a", run.task_a},
                    {"task_b", run.task_b},
                    {"head_digest_before", run.head_digest_before},
                    {"head_digest_after", run.head_digest_after},
                    {"effective_head_digest_after", run.effective_head_digest_after}};
      const int e = std::min(3, sim.finetune_epochs);
      log << name << ": task A " << num(run.task_a.front()) << " -> " << num(run.task_a.back()) << ", task B "
          << num(run.task_b.front()) << " -> " << num(run.task_b.back()) << ", task-B drop after " << e
          << " epoch(s) " << num(run.task_b_drop(e)) << '\n';
    }
    fs::create_directories(out_dir);
    write_file(out_dir / kCurvesFile, curve_csv(curve));
    write_file(out_dir / kSummaryFile, json{{"config", to_json(cfg)}, {"runs", runs}}.dump(2) + "\n");
    return 0;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace emt
