#pragma once

#include <filesystem>
#include <ostream>
#include <vector>

#include <json.hpp>

#include "emt/lab/adapter_sim.hpp"
#include "emt/lab/layer_peeled.hpp"
#include "emt/lab/toy_train.hpp"

namespace emt {

/// Problem file of `collapse solve|sweep`.
struct CollapseConfig {
  lab::LayerPeeledProblem problem{4, 8, 0, 1, 1, 1.0, 1.0};
  lab::SolverOptions solver;
  std::vector<double> ratios{1, 10, 100, 1000};
};

struct ForgetSimConfig {
  lab::ToyTrainConfig toy;
  /// Run baseline, reinit_classifier and reinit_optimizer side by side.
  bool variants = true;
};

struct AdapterSimCommandConfig {
  lab::AdapterSimConfig sim;
  std::vector<lab::AdapterMode> modes{lab::AdapterMode::Linear, lab::AdapterMode::Lora};
};

// Lab config files: JSON objects with "schema_version": 1; every other key is
// optional and defaults to the struct default. Parse errors throw ConfigError.
nlohmann::json to_json(const lab::LayerPeeledProblem& p);
nlohmann::json to_json(const lab::SolverOptions& o);
nlohmann::json to_json(const lab::ToyTrainConfig& c);
nlohmann::json to_json(const lab::AdapterSimConfig& c);
nlohmann::json to_json(const CollapseConfig& c);
nlohmann::json to_json(const ForgetSimConfig& c);
nlohmann::json to_json(const AdapterSimCommandConfig& c);
CollapseConfig collapse_config_from_json(const nlohmann::json& j);
ForgetSimConfig forget_config_from_json(const nlohmann::json& j);
AdapterSimCommandConfig adapter_config_from_json(const nlohmann::json& j);
/// Reads a JSON file; throws ConfigError.
nlohmann::json load_json_file(const std::filesystem::path& path);

/// Output names inside out_dir.
inline constexpr const char* kSummaryFile = "summary.json";
inline constexpr const char* kCurvesFile = "curves.csv";
inline constexpr const char* kSweepFile = "sweep.csv";

/// summary.json {problem, opts, metrics, converged, final_objective} and
/// curves.csv (objective per accepted step). Exit 0 on success (a
/// non-converged solve is flagged in the summary), 2 on an invalid problem.
int cmd_collapse_solve(const CollapseConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);
/// sweep.csv with one row per ratio, curves.csv (x = ratio) and summary.json.
/// Exit 1 when any ratio failed (the others are still written).
int cmd_collapse_sweep(const CollapseConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);
int cmd_forget_sim(const ForgetSimConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);
int cmd_adapter_sim(const AdapterSimCommandConfig& cfg, const std::filesystem::path& out_dir,
                    std::ostream& log);

}  // namespace emt
