#include <doctest.h>

#include <cmath>

#include "emt/lab/layer_peeled.hpp"
#include "emt/rng.hpp"
#include "oracles.hpp"

using namespace emt;
using namespace emt::lab;

namespace {

LayerPeeledProblem prob(int K, int p, int KA, std::int64_t na, std::int64_t nb) {
  return {K, p, KA, na, nb, 1.0, 1.0};
}

std::vector<std::int64_t> counts(const LayerPeeledProblem& pr) {
  std::vector<std::int64_t> n;
  for (int k = 0; k < pr.classes; ++k) n.push_back(pr.class_count(k));
  return n;
}

std::vector<double> flat(const Matrix& m) { return {m.values().begin(), m.values().end()}; }

}  // namespace

TEST_CASE("problem validation") {
  CHECK_NOTHROW(prob(4, 8, 0, 1, 1).validate());
  try {
    prob(10, 8, 5, 10, 1).validate();
    FAIL("expected p < K to be rejected");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("p >= K") != std::string::npos);
  }
  CHECK_THROWS(prob(1, 8, 0, 1, 1).validate());
  CHECK_THROWS(prob(4, 8, 5, 1, 1).validate());
  CHECK_THROWS(prob(4, 8, 2, 1, 2).validate());
  auto p = prob(4, 8, 0, 1, 1);
  p.w_budget = 0;
  CHECK_THROWS(p.validate());
}

TEST_CASE("objective matches the per-sample oracle") {
  for (auto pr : {prob(4, 8, 0, 1, 1), prob(5, 6, 2, 7, 3), prob(3, 3, 3, 4, 4)}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto st = random_state(pr, seed);
      const double ours = objective(pr, st);
      const double ref = oracle::layer_peeled_objective(flat(st.W), flat(st.H), pr.classes, pr.dim, counts(pr));
      CHECK(ours == doctest::Approx(ref).epsilon(1e-12));
      // the full form agrees with the class-reduced form
      const auto full = expand_to_full(pr, st);
      CHECK(objective(pr, full) == doctest::Approx(ours).epsilon(1e-12));
    }
  }
}

TEST_CASE("analytic gradient passes a finite-difference check at 1e-5") {
  const auto pr = prob(5, 7, 2, 9, 2);
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix W(5, 7), H(5, 7);
    for (auto& v : W.values()) v = rng.normal();
    for (auto& v : H.values()) v = rng.normal();
    const auto st = reduced_state(W, H);
    const auto g = objective_gradient(pr, st);
    auto fW = [&](const std::vector<double>& w) {
      return oracle::layer_peeled_objective(w, flat(H), 5, 7, counts(pr));
    };
    auto fH = [&](const std::vector<double>& h) {
      return oracle::layer_peeled_objective(flat(W), h, 5, 7, counts(pr));
    };
    const auto nW = oracle::finite_difference(fW, flat(W));
    const auto nH = oracle::finite_difference(fH, flat(H));
    CHECK(oracle::max_relative_error(g.grad_W.values(), nW) < 1e-5);
    CHECK(oracle::max_relative_error(g.grad_H.values(), nH) < 1e-5);
  }
}

TEST_CASE("serial and parallel gradients are identical") {
  const auto pr = prob(6, 9, 3, 10, 1);
  const auto st = expand_to_full(pr, random_state(pr, 3));
  const auto a = objective_gradient(pr, st, kernels::Backend::Serial);
  const auto b = objective_gradient(pr, st, kernels::Backend::Parallel);
  CHECK(a.value == b.value);
  CHECK(a.grad_W == b.grad_W);
  CHECK(a.grad_H == b.grad_H);
}

TEST_CASE("projection and feasibility") {
  const auto pr = prob(4, 8, 0, 1, 1);
  auto st = random_state(pr, 1);
  CHECK(w_energy(st) == doctest::Approx(0.5));
  CHECK(h_energy(st) == doctest::Approx(0.5));
  CHECK(project(st, 1.0, 1.0) == st);
  for (auto& v : st.W.values()) v *= 3.0;
  CHECK_FALSE(is_feasible(st, 1.0, 1.0));
  CHECK_THROWS_AS(objective(pr, st), InfeasibleState);
  const auto before = st.W;
  const auto pj = project(st, 1.0, 1.0);
  CHECK(w_energy(pj) == doctest::Approx(1.0));
  CHECK(is_feasible(pj, 1.0, 1.0));
  // direction preserved
  const double ratio = pj.W(0, 0) / before(0, 0);
  for (std::size_t i = 0; i < before.size(); ++i)
    CHECK(pj.W.values()[i] == doctest::Approx(ratio * before.values()[i]));
}

TEST_CASE("collapse metrics against brute force") {
  Matrix W(3, 2);
  W(0, 0) = 1;
  W(1, 0) = 2;   // parallel to row 0
  W(2, 1) = -1;  // orthogonal
  const auto st = reduced_state(W, Matrix(3, 2));
  const auto m = collapse_metrics(st, 1);
  CHECK(m.cosines(0, 1) == doctest::Approx(1.0));
  CHECK(m.cosines(0, 2) == doctest::Approx(0.0));
  CHECK(m.etf_deviation == doctest::Approx(1.5));  // |1 - (-1/2)|
  CHECK(*m.minority_mean_cosine == doctest::Approx(0.0));
  CHECK(*m.minority_max_pair_distance == doctest::Approx(std::sqrt(5.0)));
  CHECK_FALSE(m.majority_mean_cosine.has_value());
  CHECK_FALSE(m.within_class_variability.has_value());
  W(2, 1) = 0;
  CHECK_THROWS_AS(collapse_metrics(reduced_state(W, Matrix(3, 2)), 1), ZeroNormRow);
}

TEST_CASE("balanced solve reaches the simplex ETF") {
  const auto pr = prob(4, 8, 0, 1, 1);
  SolverOptions o;
  const auto r = solve_layer_peeled(pr, o);
  CHECK(r.converged);
  const auto m = collapse_metrics(r.state, 0);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      if (i != j) CHECK(std::abs(m.cosines(i, j) + 1.0 / 3.0) < 0.05);
  CHECK(m.etf_deviation < 0.05);
  CHECK(is_feasible(r.state, 1.0, 1.0));
  for (std::size_t i = 1; i < r.trace.size(); ++i) CHECK(r.trace[i] <= r.trace[i - 1]);
  // deterministic in the seed
  const auto r2 = solve_layer_peeled(pr, o);
  CHECK(r2.state == r.state);
}

TEST_CASE("imbalance sweep") {
  const auto base = prob(6, 8, 3, 1, 1);
  const double ratios[] = {1, 100};
  const auto rows = imbalance_sweep(base, ratios, SolverOptions{});
  REQUIRE(rows.size() == 2);
  CHECK(rows[1].n_majority == 100);
  CHECK(rows[1].n_minority == 1);
  REQUIRE(rows[1].metrics.has_value());
  CHECK(*rows[1].metrics->minority_mean_cosine > *rows[0].metrics->minority_mean_cosine);
  const double unsorted[] = {10, 1};
  CHECK_THROWS_AS(imbalance_sweep(base, unsorted, SolverOptions{}), std::invalid_argument);
  const double bad[] = {0.5, 1};
  const auto rb = imbalance_sweep(base, bad, SolverOptions{});
  CHECK_FALSE(rb[0].error.empty());
  CHECK(rb[1].error.empty());
}
