#include "emt/lab/layer_peeled.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "emt/rng.hpp"

namespace emt::lab {

namespace {

constexpr double kFeasibilitySlack = 1e-9;

double squared_norm(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return acc;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

std::vector<std::int64_t> rows_per_class(const LayerPeeledState& st) {
  std::vector<std::int64_t> counts(st.W.rows(), 0);
  for (int c : st.feature_class) ++counts.at(static_cast<std::size_t>(c));
  return counts;
}

// Per-row sample weight c_i = multiplicity_i / N.
std::vector<double> row_weights(const LayerPeeledProblem& prob, const LayerPeeledState& st) {
  std::vector<double> weights(st.H.rows());
  if (st.form == FeatureForm::ClassReduced) {
    const double total = static_cast<double>(prob.total_samples());
    for (std::size_t i = 0; i < weights.size(); ++i)
      weights[i] = static_cast<double>(prob.class_count(st.feature_class[i])) / total;
  } else {
    const double total = static_cast<double>(st.H.rows());
    std::fill(weights.begin(), weights.end(), 1.0 / total);
  }
  return weights;
}

void scale(Matrix& m, double factor) {
  for (double& v : m.values()) v *= factor;
}

}  // namespace

std::int64_t LayerPeeledProblem::total_samples() const {
  return static_cast<std::int64_t>(majority_classes) * n_majority +
         static_cast<std::int64_t>(classes - majority_classes) * n_minority;
}

void LayerPeeledProblem::validate() const {
  if (classes < 2) throw std::invalid_argument("layer-peeled problem needs K >= 2");
  if (dim < classes)
    throw std::invalid_argument("layer-peeled problem needs p >= K (hypothesis of the "
                                "minority-collapse theorem); got p=" +
                                std::to_string(dim) + ", K=" + std::to_string(classes));
  if (majority_classes < 0 || majority_classes > classes)
    throw std::invalid_argument("majority class count K_A must lie in [0, K]");
  if (n_minority < 1 || n_majority < n_minority)
    throw std::invalid_argument("sample counts need n_a >= n_b >= 1");
  if (!(w_budget > 0.0) || !(h_budget > 0.0))
    throw std::invalid_argument("norm budgets E_W, E_H must be positive");
}

double ce_loss(std::span<const double> z, int k) {
  return kernels::log_sum_exp(z) - z[static_cast<std::size_t>(k)];
}

double w_energy(const LayerPeeledState& st) {
  return squared_norm(st.W.values()) / static_cast<double>(st.W.rows());
}

double h_energy(const LayerPeeledState& st) {
  const auto classes = static_cast<double>(st.W.rows());
  if (st.form == FeatureForm::ClassReduced) return squared_norm(st.H.values()) / classes;
  const auto counts = rows_per_class(st);
  double acc = 0.0;
  for (std::size_t i = 0; i < st.H.rows(); ++i) {
    const auto n = counts[static_cast<std::size_t>(st.feature_class[i])];
    acc += squared_norm(st.H.row(i)) / static_cast<double>(n);
  }
  return acc / classes;
}

bool is_feasible(const LayerPeeledState& st, double w_budget, double h_budget) {
  return w_energy(st) <= w_budget * (1.0 + kFeasibilitySlack) &&
         h_energy(st) <= h_budget * (1.0 + kFeasibilitySlack);
}

double objective(const LayerPeeledProblem& prob, const LayerPeeledState& st) {
  if (w_energy(st) > prob.w_budget * (1.0 + kFeasibilitySlack))
    throw InfeasibleState("classifier energy " + std::to_string(w_energy(st)) +
                          " exceeds E_W=" + std::to_string(prob.w_budget));
  if (h_energy(st) > prob.h_budget * (1.0 + kFeasibilitySlack))
    throw InfeasibleState("feature energy " + std::to_string(h_energy(st)) +
                          " exceeds E_H=" + std::to_string(prob.h_budget));
  return objective_gradient(prob, st).value;
}

ObjectiveGradient objective_gradient(const LayerPeeledProblem& prob, const LayerPeeledState& st,
                                     kernels::Backend backend) {
  const auto rows = st.H.rows();
  const auto classes = st.W.rows();
  Matrix logits(rows, classes);
  kernels::dense_forward(backend, st.H, st.W, {}, logits);

  const auto weights = row_weights(prob, st);
  std::vector<double> row_loss(rows);
  Matrix grad_logits(rows, classes);
  kernels::softmax_xent(backend, logits, st.feature_class, weights, row_loss, grad_logits);

  ObjectiveGradient out;
  for (double v : row_loss) out.value += v;
  out.grad_W = Matrix(classes, st.W.cols());
  out.grad_H = Matrix(rows, st.H.cols());
  kernels::dense_backward_weights(backend, grad_logits, st.H, out.grad_W, {});
  kernels::dense_backward_input(backend, grad_logits, st.W, out.grad_H);
  return out;
}

LayerPeeledState project(LayerPeeledState st, double w_budget, double h_budget) {
  const double we = w_energy(st);
  if (we > w_budget) scale(st.W, std::sqrt(w_budget / we));
  const double he = h_energy(st);
  if (he > h_budget) scale(st.H, std::sqrt(h_budget / he));
  return st;
}

LayerPeeledState reduced_state(const Matrix& W, const Matrix& H_per_class) {
  if (H_per_class.rows() != W.rows() || H_per_class.cols() != W.cols())
    throw std::invalid_argument("class-reduced H must be K x p like W");
  LayerPeeledState st{W, H_per_class, {}, FeatureForm::ClassReduced};
  st.feature_class.resize(W.rows());
  for (std::size_t k = 0; k < W.rows(); ++k) st.feature_class[k] = static_cast<int>(k);
  return st;
}

LayerPeeledState expand_to_full(const LayerPeeledProblem& prob, const LayerPeeledState& reduced) {
  if (reduced.form != FeatureForm::ClassReduced)
    throw std::invalid_argument("expand_to_full expects a class-reduced state");
  const auto total = static_cast<std::size_t>(prob.total_samples());
  LayerPeeledState full{reduced.W, Matrix(total, reduced.H.cols()), {}, FeatureForm::Full};
  full.feature_class.reserve(total);
  std::size_t r = 0;
  for (int k = 0; k < prob.classes; ++k) {
    for (std::int64_t i = 0; i < prob.class_count(k); ++i, ++r) {
      const auto src = reduced.H.row(static_cast<std::size_t>(k));
      std::copy(src.begin(), src.end(), full.H.row(r).begin());
      full.feature_class.push_back(k);
    }
  }
  return full;
}

LayerPeeledState random_state(const LayerPeeledProblem& prob, std::uint64_t seed) {
  const auto K = static_cast<std::size_t>(prob.classes);
  const auto p = static_cast<std::size_t>(prob.dim);
  Rng rng(seed);
  Matrix W(K, p), H(K, p);
  for (double& v : W.values()) v = rng.normal();
  for (double& v : H.values()) v = rng.normal();
  auto st = reduced_state(W, H);
  scale(st.W, std::sqrt(0.5 * prob.w_budget / w_energy(st)));
  scale(st.H, std::sqrt(0.5 * prob.h_budget / h_energy(st)));
  return st;
}

SolveResult descend(const LayerPeeledProblem& prob, LayerPeeledState start,
                    const SolverOptions& opts) {
  SolveResult res;
  LayerPeeledState x = project(std::move(start), prob.w_budget, prob.h_budget);
  auto g = objective_gradient(prob, x, opts.backend);
  res.trace.push_back(g.value);

  const double max_step = opts.lr * 64.0;
  const double min_step = opts.lr * 1e-14;
  double step = opts.lr;
  double step_norm = std::numeric_limits<double>::infinity();
  bool stalled = false;

  int it = 0;
  for (; it < opts.iters; ++it) {
    LayerPeeledState trial;
    ObjectiveGradient gt;
    double moved_sq = 0.0;
    for (;;) {
      trial = x;
      for (std::size_t i = 0; i < trial.W.size(); ++i)
        trial.W.values()[i] -= step * g.grad_W.values()[i];
      for (std::size_t i = 0; i < trial.H.size(); ++i)
        trial.H.values()[i] -= step * g.grad_H.values()[i];
      trial = project(std::move(trial), prob.w_budget, prob.h_budget);
      gt = objective_gradient(prob, trial, opts.backend);

      double lin = 0.0;
      moved_sq = 0.0;
      for (std::size_t i = 0; i < trial.W.size(); ++i) {
        const double d = trial.W.values()[i] - x.W.values()[i];
        lin += g.grad_W.values()[i] * d;
        moved_sq += d * d;
      }
      for (std::size_t i = 0; i < trial.H.size(); ++i) {
        const double d = trial.H.values()[i] - x.H.values()[i];
        lin += g.grad_H.values()[i] * d;
        moved_sq += d * d;
      }
      if (!opts.backtracking) break;
      const bool sufficient = gt.value <= g.value + lin + moved_sq / (2.0 * step);
      if (sufficient && gt.value <= g.value) break;
      step *= 0.5;
      if (step < min_step) {
        stalled = true;
        break;
      }
    }
    if (stalled) break;

    step_norm = std::sqrt(moved_sq) / step;
    x = std::move(trial);
    g = std::move(gt);
    res.trace.push_back(g.value);
    if (opts.backtracking) step = std::min(step * 1.25, max_step);

    const auto n = res.trace.size();
    if (n > static_cast<std::size_t>(opts.window)) {
      const double drop = res.trace[n - 1 - static_cast<std::size_t>(opts.window)] - res.trace[n - 1];
      if (drop < opts.tol) {
        res.converged = true;
        ++it;
        break;
      }
    }
  }
  // A stalled line search means no representable decrease is left.
  if (stalled) res.converged = true;

  res.iterations = it;
  res.grad_norm = step_norm;
  res.objective = g.value;
  res.state = std::move(x);
  return res;
}

SolveResult solve_layer_peeled(const LayerPeeledProblem& prob, const SolverOptions& opts) {
  prob.validate();
  const int restarts = std::max(1, opts.restarts);
  std::vector<SolveResult> runs(static_cast<std::size_t>(restarts));
#pragma omp parallel for schedule(dynamic)
  for (int r = 0; r < restarts; ++r) {
    const auto seed = derive_seed(opts.seed, static_cast<std::uint64_t>(r));
    runs[static_cast<std::size_t>(r)] = descend(prob, random_state(prob, seed), opts);
  }
  std::size_t best = 0;
  for (std::size_t r = 1; r < runs.size(); ++r)
    if (runs[r].objective < runs[best].objective) best = r;
  SolveResult out = std::move(runs[best]);
  out.best_restart = static_cast<int>(best);
  return out;
}

CollapseMetrics collapse_metrics(const LayerPeeledState& st, int majority_classes) {
  const auto K = st.W.rows();
  CollapseMetrics m;
  m.cosines = Matrix(K, K);
  std::vector<double> norms(K);
  for (std::size_t k = 0; k < K; ++k) {
    norms[k] = std::sqrt(squared_norm(st.W.row(k)));
    if (norms[k] == 0.0) throw ZeroNormRow(k);
  }
  const double etf = K > 1 ? -1.0 / static_cast<double>(K - 1) : 0.0;
  for (std::size_t i = 0; i < K; ++i) {
    m.cosines(i, i) = 1.0;
    for (std::size_t j = i + 1; j < K; ++j) {
      const double c = dot(st.W.row(i), st.W.row(j)) / (norms[i] * norms[j]);
      m.cosines(i, j) = c;
      m.cosines(j, i) = c;
      m.etf_deviation = std::max(m.etf_deviation, std::abs(c - etf));
    }
  }

  const auto first_minor = static_cast<std::size_t>(std::clamp(majority_classes, 0, static_cast<int>(K)));
  auto group_stats = [&](std::size_t lo, std::size_t hi, std::optional<double>& mean_cos,
                         std::optional<double>* max_dist) {
    if (hi - lo < 2) return;
    double sum = 0.0, worst = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = lo; i < hi; ++i) {
      for (std::size_t j = i + 1; j < hi; ++j) {
        sum += m.cosines(i, j);
        ++pairs;
        double d2 = 0.0;
        for (std::size_t c = 0; c < st.W.cols(); ++c) {
          const double d = st.W(i, c) - st.W(j, c);
          d2 += d * d;
        }
        worst = std::max(worst, std::sqrt(d2));
      }
    }
    mean_cos = sum / static_cast<double>(pairs);
    if (max_dist) *max_dist = worst;
  };
  group_stats(first_minor, K, m.minority_mean_cosine, &m.minority_max_pair_distance);
  group_stats(0, first_minor, m.majority_mean_cosine, nullptr);

  if (st.form == FeatureForm::Full) {
    const auto counts = rows_per_class(st);
    Matrix means(K, st.H.cols());
    for (std::size_t i = 0; i < st.H.rows(); ++i) {
      const auto k = static_cast<std::size_t>(st.feature_class[i]);
      for (std::size_t c = 0; c < st.H.cols(); ++c) means(k, c) += st.H(i, c);
    }
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t c = 0; c < st.H.cols(); ++c)
        if (counts[k] > 0) means(k, c) /= static_cast<double>(counts[k]);
    double acc = 0.0;
    for (std::size_t i = 0; i < st.H.rows(); ++i) {
      const auto k = static_cast<std::size_t>(st.feature_class[i]);
      double d2 = 0.0;
      for (std::size_t c = 0; c < st.H.cols(); ++c) {
        const double d = st.H(i, c) - means(k, c);
        d2 += d * d;
      }
      acc += d2 / static_cast<double>(counts[k]);
    }
    m.within_class_variability = acc / static_cast<double>(K);
  }
  return m;
}

std::vector<SweepRow> imbalance_sweep(const LayerPeeledProblem& base,
                                      std::span<const double> ratios, const SolverOptions& opts) {
  if (!std::is_sorted(ratios.begin(), ratios.end()))
    throw std::invalid_argument("imbalance ratios must be sorted ascending");
  std::vector<SweepRow> rows(ratios.size());
  SolverOptions inner = opts;
  const auto n = static_cast<std::ptrdiff_t>(ratios.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    auto& row = rows[static_cast<std::size_t>(i)];
    row.ratio = ratios[static_cast<std::size_t>(i)];
    row.n_minority = base.n_minority;
    row.n_majority = std::llround(row.ratio * static_cast<double>(base.n_minority));
    try {
      if (!(row.ratio >= 1.0)) throw std::invalid_argument("imbalance ratio must be >= 1");
      LayerPeeledProblem prob = base;
      prob.n_majority = row.n_majority;
      auto res = solve_layer_peeled(prob, inner);
      row.metrics = collapse_metrics(res.state, prob.majority_classes);
      row.result = std::move(res);
    } catch (const std::exception& e) {
      row.error = e.what();
    }
  }
  return rows;
}

}  // namespace emt::lab
