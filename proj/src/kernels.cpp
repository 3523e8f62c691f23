#include "emt/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace emt::kernels {

double log_sum_exp(std::span<const double> z) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : z) hi = std::max(hi, v);
  double acc = 0.0;
  for (double v : z) acc += std::exp(v - hi);
  return hi + std::log(acc);
}

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

void check_forward(const Matrix& x, const Matrix& w, std::span<const double> bias,
                   const Matrix& out) {
  require(x.cols() == w.cols(), "dense_forward: input width mismatch");
  require(bias.empty() || bias.size() == w.rows(), "dense_forward: bias size");
  require(out.rows() == x.rows() && out.cols() == w.rows(), "dense_forward: output shape");
}

void check_backward_weights(const Matrix& g, const Matrix& x, const Matrix& gw,
                            std::span<double> gb) {
  require(g.rows() == x.rows(), "dense_backward_weights: batch mismatch");
  require(gw.rows() == g.cols() && gw.cols() == x.cols(),
          "dense_backward_weights: gradient shape");
  require(gb.empty() || gb.size() == g.cols(), "dense_backward_weights: bias size");
}

void check_backward_input(const Matrix& g, const Matrix& w, const Matrix& gx) {
  require(g.cols() == w.rows(), "dense_backward_input: width mismatch");
  require(gx.rows() == g.rows() && gx.cols() == w.cols(),
          "dense_backward_input: gradient shape");
}

void check_xent(const Matrix& logits, std::span<const int> labels,
                std::span<const double> weight, std::span<double> loss, const Matrix& g) {
  const auto n = logits.rows();
  require(labels.size() == n && weight.size() == n && loss.size() == n,
          "softmax_xent: row count mismatch");
  require(g.rows() == n && g.cols() == logits.cols(), "softmax_xent: gradient shape");
}

void check_nearest(const Matrix& q, const Matrix& t, std::span<std::size_t> idx,
                   std::span<double> dist) {
  require(t.rows() > 0, "nearest_rows: empty table");
  require(q.cols() == t.cols(), "nearest_rows: dimension mismatch");
  require(idx.size() == q.rows() && dist.size() == q.rows(), "nearest_rows: output size");
}

// Row bodies shared by both backends so the arithmetic order is identical.

inline void forward_row(const Matrix& x, const Matrix& w, std::span<const double> bias,
                        Matrix& out, std::size_t b) {
  const auto xr = x.row(b);
  auto orow = out.row(b);
  for (std::size_t o = 0; o < w.rows(); ++o) {
    const auto wr = w.row(o);
    double acc = bias.empty() ? 0.0 : bias[o];
    for (std::size_t i = 0; i < xr.size(); ++i) acc += xr[i] * wr[i];
    orow[o] = acc;
  }
}

inline void backward_weights_row(const Matrix& g, const Matrix& x, Matrix& gw,
                                 std::span<double> gb, std::size_t o) {
  auto gwr = gw.row(o);
  std::fill(gwr.begin(), gwr.end(), 0.0);
  double bias_acc = 0.0;
  for (std::size_t b = 0; b < g.rows(); ++b) {
    const double coef = g(b, o);
    bias_acc += coef;
    if (coef == 0.0) continue;
    const auto xr = x.row(b);
    for (std::size_t i = 0; i < xr.size(); ++i) gwr[i] += coef * xr[i];
  }
  if (!gb.empty()) gb[o] = bias_acc;
}

inline void backward_input_row(const Matrix& g, const Matrix& w, Matrix& gx, std::size_t b) {
  auto gxr = gx.row(b);
  std::fill(gxr.begin(), gxr.end(), 0.0);
  const auto gr = g.row(b);
  for (std::size_t o = 0; o < w.rows(); ++o) {
    const double coef = gr[o];
    if (coef == 0.0) continue;
    const auto wr = w.row(o);
    for (std::size_t i = 0; i < wr.size(); ++i) gxr[i] += coef * wr[i];
  }
}

inline void xent_row(const Matrix& logits, std::span<const int> labels,
                     std::span<const double> weight, std::span<double> loss, Matrix& g,
                     std::size_t r) {
  const auto z = logits.row(r);
  auto gr = g.row(r);
  const double wgt = weight[r];
  const auto label = static_cast<std::size_t>(labels[r]);
  if (wgt == 0.0) {
    loss[r] = 0.0;
    std::fill(gr.begin(), gr.end(), 0.0);
    return;
  }
  const double lse = log_sum_exp(z);
  loss[r] = wgt * (lse - z[label]);
  for (std::size_t k = 0; k < z.size(); ++k) {
    gr[k] = wgt * (std::exp(z[k] - lse) - (k == label ? 1.0 : 0.0));
  }
}

inline void nearest_row(const Matrix& q, const Matrix& t, std::span<std::size_t> idx,
                        std::span<double> dist, std::size_t r) {
  const auto qr = q.row(r);
  std::size_t best = 0;
  double best_sq = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < t.rows(); ++k) {
    const auto tr = t.row(k);
    double sq = 0.0;
    for (std::size_t i = 0; i < tr.size(); ++i) {
      const double d = qr[i] - tr[i];
      sq += d * d;
    }
    if (sq < best_sq) {
      best_sq = sq;
      best = k;
    }
  }
  idx[r] = best;
  dist[r] = std::sqrt(best_sq);
}

using Index = std::ptrdiff_t;

}  // namespace

namespace serial {

void dense_forward(const Matrix& x, const Matrix& w, std::span<const double> bias,
                   Matrix& out) {
  check_forward(x, w, bias, out);
  for (std::size_t b = 0; b < x.rows(); ++b) forward_row(x, w, bias, out, b);
}

void dense_backward_weights(const Matrix& grad_out, const Matrix& x, Matrix& grad_w,
                            std::span<double> grad_bias) {
  check_backward_weights(grad_out, x, grad_w, grad_bias);
  for (std::size_t o = 0; o < grad_w.rows(); ++o)
    backward_weights_row(grad_out, x, grad_w, grad_bias, o);
}

void dense_backward_input(const Matrix& grad_out, const Matrix& w, Matrix& grad_x) {
  check_backward_input(grad_out, w, grad_x);
  for (std::size_t b = 0; b < grad_out.rows(); ++b) backward_input_row(grad_out, w, grad_x, b);
}

void softmax_xent(const Matrix& logits, std::span<const int> labels,
                  std::span<const double> row_weight, std::span<double> row_loss,
                  Matrix& grad_logits) {
  check_xent(logits, labels, row_weight, row_loss, grad_logits);
  for (std::size_t r = 0; r < logits.rows(); ++r)
    xent_row(logits, labels, row_weight, row_loss, grad_logits, r);
}

void nearest_rows(const Matrix& queries, const Matrix& table, std::span<std::size_t> index,
                  std::span<double> distance) {
  check_nearest(queries, table, index, distance);
  for (std::size_t r = 0; r < queries.rows(); ++r)
    nearest_row(queries, table, index, distance, r);
}

}  // namespace serial

namespace parallel {

void dense_forward(const Matrix& x, const Matrix& w, std::span<const double> bias,
                   Matrix& out) {
  check_forward(x, w, bias, out);
  const auto n = static_cast<Index>(x.rows());
#pragma omp parallel for schedule(static)
  for (Index b = 0; b < n; ++b) forward_row(x, w, bias, out, static_cast<std::size_t>(b));
}

void dense_backward_weights(const Matrix& grad_out, const Matrix& x, Matrix& grad_w,
                            std::span<double> grad_bias) {
  check_backward_weights(grad_out, x, grad_w, grad_bias);
  const auto n = static_cast<Index>(grad_w.rows());
#pragma omp parallel for schedule(static)
  for (Index o = 0; o < n; ++o)
    backward_weights_row(grad_out, x, grad_w, grad_bias, static_cast<std::size_t>(o));
}

void dense_backward_input(const Matrix& grad_out, const Matrix& w, Matrix& grad_x) {
  check_backward_input(grad_out, w, grad_x);
  const auto n = static_cast<Index>(grad_out.rows());
#pragma omp parallel for schedule(static)
  for (Index b = 0; b < n; ++b)
    backward_input_row(grad_out, w, grad_x, static_cast<std::size_t>(b));
}

void softmax_xent(const Matrix& logits, std::span<const int> labels,
                  std::span<const double> row_weight, std::span<double> row_loss,
                  Matrix& grad_logits) {
  check_xent(logits, labels, row_weight, row_loss, grad_logits);
  const auto n = static_cast<Index>(logits.rows());
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < n; ++r)
    xent_row(logits, labels, row_weight, row_loss, grad_logits, static_cast<std::size_t>(r));
}

void nearest_rows(const Matrix& queries, const Matrix& table, std::span<std::size_t> index,
                  std::span<double> distance) {
  check_nearest(queries, table, index, distance);
  const auto n = static_cast<Index>(queries.rows());
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < n; ++r)
    nearest_row(queries, table, index, distance, static_cast<std::size_t>(r));
}

}  // namespace parallel

void dense_forward(Backend be, const Matrix& x, const Matrix& w,
                   std::span<const double> bias, Matrix& out) {
  be == Backend::Serial ? serial::dense_forward(x, w, bias, out)
                        : parallel::dense_forward(x, w, bias, out);
}

void dense_backward_weights(Backend be, const Matrix& grad_out, const Matrix& x,
                            Matrix& grad_w, std::span<double> grad_bias) {
  be == Backend::Serial ? serial::dense_backward_weights(grad_out, x, grad_w, grad_bias)
                        : parallel::dense_backward_weights(grad_out, x, grad_w, grad_bias);
}

void dense_backward_input(Backend be, const Matrix& grad_out, const Matrix& w,
                          Matrix& grad_x) {
  be == Backend::Serial ? serial::dense_backward_input(grad_out, w, grad_x)
                        : parallel::dense_backward_input(grad_out, w, grad_x);
}

void softmax_xent(Backend be, const Matrix& logits, std::span<const int> labels,
                  std::span<const double> row_weight, std::span<double> row_loss,
                  Matrix& grad_logits) {
  be == Backend::Serial
      ? serial::softmax_xent(logits, labels, row_weight, row_loss, grad_logits)
      : parallel::softmax_xent(logits, labels, row_weight, row_loss, grad_logits);
}

void nearest_rows(Backend be, const Matrix& queries, const Matrix& table,
                  std::span<std::size_t> index, std::span<double> distance) {
  be == Backend::Serial ? serial::nearest_rows(queries, table, index, distance)
                        : parallel::nearest_rows(queries, table, index, distance);
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_num_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

}  // namespace emt::kernels
