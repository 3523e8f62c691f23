#pragma once

// Layer-peeled cross-entropy model: only the last-layer classifier W (K x p)
// and the features H are free, each inside an average squared-norm budget.
// The solver is projected gradient descent; the metrics measure how close the
// classifier rows are to a simplex ETF and whether minority rows collapse.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "emt/kernels.hpp"
#include "emt/matrix.hpp"

namespace emt::lab {

class InfeasibleState : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ZeroNormRow : public std::runtime_error {
 public:
  explicit ZeroNormRow(std::size_t row)
      : std::runtime_error("classifier row " + std::to_string(row) +
                           " has zero norm; cosine undefined"),
        row_(row) {}
  std::size_t row() const { return row_; }

 private:
  std::size_t row_;
};

/// Classes [0, majority_classes) hold n_majority samples each, the rest
/// n_minority samples each.
struct LayerPeeledProblem {
  int classes = 0;           // K
  int dim = 0;               // p
  int majority_classes = 0;  // K_A
  std::int64_t n_majority = 1;
  std::int64_t n_minority = 1;
  double w_budget = 1.0;  // E_W
  double h_budget = 1.0;  // E_H

  std::int64_t class_count(int k) const { return k < majority_classes ? n_majority : n_minority; }
  std::int64_t total_samples() const;
  int minority_classes() const { return classes - majority_classes; }

  /// Throws std::invalid_argument; p >= K is the minority-collapse theorem's hypothesis.
  void validate() const;
};

enum class FeatureForm { ClassReduced, Full };

/// H stores one feature per row. In the class-reduced form row k is the
/// shared feature of class k (standing for n_k identical samples); in the
/// full form there is one row per sample.
struct LayerPeeledState {
  Matrix W;
  Matrix H;
  std::vector<int> feature_class;
  FeatureForm form = FeatureForm::ClassReduced;

  friend bool operator==(const LayerPeeledState&, const LayerPeeledState&) = default;
};

/// -log softmax(z)[k], max-shifted.
double ce_loss(std::span<const double> z, int k);

/// (1/K) sum_k ||w_k||^2
double w_energy(const LayerPeeledState& st);
/// (1/K) sum_k (1/n_k) sum_i ||h_{k,i}||^2 with n_k taken from the problem
/// (class-reduced) or from row counts (full).
double h_energy(const LayerPeeledState& st);

bool is_feasible(const LayerPeeledState& st, double w_budget, double h_budget);

/// Objective value; throws InfeasibleState when a budget is exceeded beyond 1e-9 relative.
double objective(const LayerPeeledProblem& prob, const LayerPeeledState& st);

struct ObjectiveGradient {
  double value = 0.0;
  Matrix grad_W;
  Matrix grad_H;
};

/// Objective and analytic gradients (no feasibility check).
ObjectiveGradient objective_gradient(const LayerPeeledProblem& prob, const LayerPeeledState& st,
                                     kernels::Backend backend = kernels::Backend::Serial);

/// Uniform rescaling of W and of H onto their budgets; identity when feasible.
LayerPeeledState project(LayerPeeledState st, double w_budget, double h_budget);

/// Class-reduced state with one row per class.
LayerPeeledState reduced_state(const Matrix& W, const Matrix& H_per_class);

/// Duplicates every class feature n_k times.
LayerPeeledState expand_to_full(const LayerPeeledProblem& prob, const LayerPeeledState& reduced);

/// Gaussian start, each block scaled to half its budget.
LayerPeeledState random_state(const LayerPeeledProblem& prob, std::uint64_t seed);

struct SolverOptions {
  double lr = 1.0;
  int iters = 20000;
  std::uint64_t seed = 0;
  double tol = 1e-12;
  int window = 200;
  int restarts = 3;
  bool backtracking = true;
  kernels::Backend backend = kernels::Backend::Serial;
};

struct SolveResult {
  LayerPeeledState state;
  double objective = 0.0;
  bool converged = false;
  /// Norm of the projected-gradient step x - P(x - g).
  double grad_norm = 0.0;
  int iterations = 0;
  int best_restart = 0;
  /// Objective after every accepted step of the returned restart.
  std::vector<double> trace;
};

/// Projected gradient descent from `restarts` seeded starts; best objective
/// wins (lowest restart index on ties). Restarts run in parallel.
SolveResult solve_layer_peeled(const LayerPeeledProblem& prob, const SolverOptions& opts);

/// Single descent run from a given start.
SolveResult descend(const LayerPeeledProblem& prob, LayerPeeledState start,
                    const SolverOptions& opts);

struct CollapseMetrics {
  Matrix cosines;
  double etf_deviation = 0.0;
  std::optional<double> minority_mean_cosine;
  std::optional<double> minority_max_pair_distance;
  std::optional<double> majority_mean_cosine;
  std::optional<double> within_class_variability;
};

CollapseMetrics collapse_metrics(const LayerPeeledState& st, int majority_classes);

struct SweepRow {
  double ratio = 1.0;
  std::int64_t n_majority = 1;
  std::int64_t n_minority = 1;
  std::optional<SolveResult> result;
  std::optional<CollapseMetrics> metrics;
  std::string error;
};

/// One solve per imbalance ratio (n_a = round(ratio * n_b)); failures are
/// recorded per row and the sweep continues.
std::vector<SweepRow> imbalance_sweep(const LayerPeeledProblem& base,
                                      std::span<const double> ratios, const SolverOptions& opts);

}  // namespace emt::lab
