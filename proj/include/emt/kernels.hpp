#pragma once

// Data-parallel inner loops shared by the collapse lab and the embedding
// matcher. Every kernel exists twice: `serial` is the reference kept for
// testing, `parallel` is the OpenMP build. Parallel loops partition output
// rows only and never reduce across threads, so both variants produce
// bit-identical results; the tests assert exactly that.

#include <cstddef>
#include <span>

#include "emt/matrix.hpp"

namespace emt::kernels {

enum class Backend { Serial, Parallel };

/// Stable log(sum(exp(z))).
double log_sum_exp(std::span<const double> z);

namespace serial {

/// out(b, o) = sum_i x(b, i) * w(o, i) + bias[o]. bias may be empty.
void dense_forward(const Matrix& x, const Matrix& w, std::span<const double> bias,
                   Matrix& out);
/// grad_w = grad_out^T x; grad_bias gets the column sums of grad_out when non-empty.
void dense_backward_weights(const Matrix& grad_out, const Matrix& x, Matrix& grad_w,
                            std::span<double> grad_bias);
/// grad_x = grad_out w.
void dense_backward_input(const Matrix& grad_out, const Matrix& w, Matrix& grad_x);
/// Row-wise weighted softmax cross-entropy: row_loss[r] = row_weight[r] * ce(row r,
/// labels[r]), grad_logits row r = row_weight[r] * (softmax - onehot).
void softmax_xent(const Matrix& logits, std::span<const int> labels,
                  std::span<const double> row_weight, std::span<double> row_loss,
                  Matrix& grad_logits);
/// Nearest table row (l2) for every query row; lowest index wins ties.
void nearest_rows(const Matrix& queries, const Matrix& table, std::span<std::size_t> index,
                  std::span<double> distance);

}  // namespace serial

namespace parallel {

void dense_forward(const Matrix& x, const Matrix& w, std::span<const double> bias,
                   Matrix& out);
void dense_backward_weights(const Matrix& grad_out, const Matrix& x, Matrix& grad_w,
                            std::span<double> grad_bias);
void dense_backward_input(const Matrix& grad_out, const Matrix& w, Matrix& grad_x);
void softmax_xent(const Matrix& logits, std::span<const int> labels,
                  std::span<const double> row_weight, std::span<double> row_loss,
                  Matrix& grad_logits);
void nearest_rows(const Matrix& queries, const Matrix& table, std::span<std::size_t> index,
                  std::span<double> distance);

}  // namespace parallel

void dense_forward(Backend be, const Matrix& x, const Matrix& w,
                   std::span<const double> bias, Matrix& out);
void dense_backward_weights(Backend be, const Matrix& grad_out, const Matrix& x,
                            Matrix& grad_w, std::span<double> grad_bias);
void dense_backward_input(Backend be, const Matrix& grad_out, const Matrix& w,
                          Matrix& grad_x);
void softmax_xent(Backend be, const Matrix& logits, std::span<const int> labels,
                  std::span<const double> row_weight, std::span<double> row_loss,
                  Matrix& grad_logits);
void nearest_rows(Backend be, const Matrix& queries, const Matrix& table,
                  std::span<std::size_t> index, std::span<double> distance);

/// Threads available to the parallel backend (1 when built without OpenMP).
int max_threads();
void set_num_threads(int n);

}  // namespace emt::kernels
