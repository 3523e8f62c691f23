#include <doctest.h>

#include <cmath>

#include "emt/kernels.hpp"
#include "emt/rng.hpp"

using namespace emt;
namespace k = emt::kernels;

namespace {

Matrix rand_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (auto& v : m.values()) v = rng.normal();
  return m;
}

}  // namespace

TEST_CASE("dense kernels against naive loops") {
  Rng rng(1);
  const auto x = rand_matrix(7, 5, rng);
  const auto w = rand_matrix(3, 5, rng);
  std::vector<double> b{0.5, -1.0, 2.0};
  Matrix y(7, 3);
  k::serial::dense_forward(x, w, b, y);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t o = 0; o < 3; ++o) {
      double s = b[o];
      for (std::size_t j = 0; j < 5; ++j) s += x(i, j) * w(o, j);
      CHECK(y(i, o) == doctest::Approx(s).epsilon(1e-12));
    }

  const auto g = rand_matrix(7, 3, rng);
  Matrix gw(3, 5, 99.0);
  std::vector<double> gb(3, 99.0);
  k::serial::dense_backward_weights(g, x, gw, gb);
  for (std::size_t o = 0; o < 3; ++o) {
    double sb = 0.0;
    for (std::size_t i = 0; i < 7; ++i) sb += g(i, o);
    CHECK(gb[o] == doctest::Approx(sb).epsilon(1e-12));
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < 7; ++i) s += g(i, o) * x(i, j);
      CHECK(gw(o, j) == doctest::Approx(s).epsilon(1e-12));
    }
  }

  Matrix gx(7, 5, 99.0);
  k::serial::dense_backward_input(g, w, gx);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (std::size_t o = 0; o < 3; ++o) s += g(i, o) * w(o, j);
      CHECK(gx(i, j) == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("softmax cross-entropy") {
  Matrix z(2, 3);
  z(0, 0) = 1;
  z(0, 1) = 2;
  z(0, 2) = 3;
  z(1, 0) = 1000;  // overflow guard
  std::vector<int> labels{2, 1};
  std::vector<double> w{1.0, 0.5}, loss(2);
  Matrix g(2, 3);
  k::serial::softmax_xent(z, labels, w, loss, g);
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  CHECK(loss[0] == doctest::Approx(lse - 3.0));
  CHECK(loss[1] == doctest::Approx(0.5 * 1000.0));
  CHECK(g(0, 2) == doctest::Approx(std::exp(3.0 - lse) - 1.0));
  CHECK(g(1, 0) == doctest::Approx(0.5));
  CHECK(std::isfinite(loss[1]));
  const double zz[] = {1000.0, 1000.0};
  CHECK(k::log_sum_exp(zz) == doctest::Approx(1000.0 + std::log(2.0)));
}

TEST_CASE("nearest rows: lowest index on ties") {
  Matrix t(3, 1);
  t(0, 0) = -1;
  t(1, 0) = 1;
  t(2, 0) = -1;
  Matrix q(2, 1);
  q(0, 0) = 0;
  q(1, 0) = -0.9;
  std::vector<std::size_t> idx(2);
  std::vector<double> d(2);
  k::serial::nearest_rows(q, t, idx, d);
  CHECK(idx[0] == 0);
  CHECK(idx[1] == 0);
  CHECK(d[1] == doctest::Approx(0.1));
}

TEST_CASE("parallel kernels are bit-identical to the serial reference") {
  Rng rng(11);
  for (std::size_t rows : {1u, 17u, 256u}) {
    const auto x = rand_matrix(rows, 33, rng);
    const auto w = rand_matrix(9, 33, rng);
    std::vector<double> b(9);
    for (auto& v : b) v = rng.normal();
    Matrix ys(rows, 9), yp(rows, 9);
    k::serial::dense_forward(x, w, b, ys);
    k::parallel::dense_forward(x, w, b, yp);
    CHECK(ys == yp);

    const auto g = rand_matrix(rows, 9, rng);
    Matrix gws(9, 33), gwp(9, 33);
    std::vector<double> gbs(9), gbp(9);
    k::serial::dense_backward_weights(g, x, gws, gbs);
    k::parallel::dense_backward_weights(g, x, gwp, gbp);
    CHECK(gws == gwp);
    CHECK(gbs == gbp);

    Matrix gxs(rows, 33), gxp(rows, 33);
    k::serial::dense_backward_input(g, w, gxs);
    k::parallel::dense_backward_input(g, w, gxp);
    CHECK(gxs == gxp);

    std::vector<int> labels(rows);
    for (std::size_t i = 0; i < rows; ++i) labels[i] = static_cast<int>(i % 9);
    std::vector<double> rw(rows, 0.7), ls(rows), lp(rows);
    Matrix gs(rows, 9), gp(rows, 9);
    k::serial::softmax_xent(ys, labels, rw, ls, gs);
    k::parallel::softmax_xent(ys, labels, rw, lp, gp);
    CHECK(ls == lp);
    CHECK(gs == gp);

    std::vector<std::size_t> is(rows), ip(rows);
    std::vector<double> ds(rows), dp(rows);
    k::serial::nearest_rows(x, w, is, ds);
    k::parallel::nearest_rows(x, w, ip, dp);
    CHECK(is == ip);
    CHECK(ds == dp);
  }
}

TEST_CASE("thread count control") {
  const int before = k::max_threads();
  k::set_num_threads(1);
  CHECK(k::max_threads() == 1);
  k::set_num_threads(before);
  CHECK(k::max_threads() >= 1);
}
