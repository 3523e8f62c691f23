#include "emt/lab/mlp.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace emt::lab {

std::string_view to_string(Activation a) {
  return a == Activation::Tanh ? "tanh" : "relu";
}

Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  throw std::invalid_argument("unknown activation \"" + std::string(s) + "\" (relu, tanh)");
}

void DenseLayer::init(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
  for (double& v : w.values()) v = rng.uniform(-bound, bound);
  for (double& v : b) v = rng.uniform(-bound, bound);
}

Mlp::Mlp(std::vector<int> widths, Activation act, Rng& rng) : act_(act) {
  if (widths.size() < 2) throw std::invalid_argument("network needs an input and an output width");
  for (int w : widths)
    if (w < 1) throw std::invalid_argument("layer widths must be positive");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    DenseLayer l{Matrix(widths[i + 1], widths[i]), std::vector<double>(widths[i + 1])};
    l.init(rng);
    layers_.push_back(std::move(l));
  }
}

Matrix Mlp::forward(const Matrix& x, kernels::Backend be, Tape* tape) const {
  if (x.cols() != input_dim())
    throw std::invalid_argument("input has " + std::to_string(x.cols()) + " features, network expects " +
                                std::to_string(input_dim()));
  if (tape) {
    tape->acts.clear();
    tape->acts.push_back(x);
  }
  Matrix cur = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Matrix out(cur.rows(), layers_[l].w.rows());
    kernels::dense_forward(be, cur, layers_[l].w, layers_[l].b, out);
    if (l + 1 < layers_.size()) {
      if (act_ == Activation::Relu) {
        for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
      } else {
        for (double& v : out.values()) v = std::tanh(v);
      }
    }
    if (tape) tape->acts.push_back(out);
    cur = std::move(out);
  }
  return cur;
}

MlpGrads Mlp::zero_grads() const {
  MlpGrads g;
  for (const auto& l : layers_) {
    g.w.emplace_back(l.w.rows(), l.w.cols());
    g.b.emplace_back(l.b.size(), 0.0);
  }
  return g;
}

MlpGrads Mlp::backward(const Tape& tape, const Matrix& grad_logits, kernels::Backend be,
                       Matrix* grad_input) const {
  if (tape.acts.size() != layers_.size() + 1) throw std::logic_error("tape does not match network");
  MlpGrads g = zero_grads();
  Matrix delta = grad_logits;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const Matrix& in = tape.acts[l];
    kernels::dense_backward_weights(be, delta, in, g.w[l], g.b[l]);
    if (l == 0 && !grad_input) break;
    Matrix prev(delta.rows(), layers_[l].w.cols());
    kernels::dense_backward_input(be, delta, layers_[l].w, prev);
    if (l > 0) {
      // in = act(pre); both derivatives are functions of the activation value
      const auto a = in.values();
      auto d = prev.values();
      if (act_ == Activation::Relu) {
        for (std::size_t i = 0; i < d.size(); ++i)
          if (a[i] <= 0.0) d[i] = 0.0;
      } else {
        for (std::size_t i = 0; i < d.size(); ++i) d[i] *= 1.0 - a[i] * a[i];
      }
    } else {
      *grad_input = std::move(prev);
      break;
    }
    delta = std::move(prev);
  }
  return g;
}

std::vector<double> Mlp::flat_params() const {
  std::vector<double> out;
  for (const auto& l : layers_) {
    out.insert(out.end(), l.w.values().begin(), l.w.values().end());
    out.insert(out.end(), l.b.begin(), l.b.end());
  }
  return out;
}

void Sgd::step(std::span<double> param, std::span<const double> grad, double lr, std::size_t slot) {
  if (param.size() != grad.size()) throw std::logic_error("parameter/gradient size mismatch");
  if (velocity_.size() <= slot) velocity_.resize(slot + 1);
  auto& v = velocity_[slot];
  const bool fresh = v.empty();
  if (fresh) v.assign(param.size(), 0.0);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i] + weight_decay_ * param[i];
    // first step after a reset takes the raw gradient, as torch.optim.SGD does
    v[i] = fresh ? g : momentum_ * v[i] + g;
    param[i] -= lr * v[i];
  }
}

void Sgd::step(Mlp& net, const MlpGrads& grads, double lr, std::size_t first_slot) {
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    step(net.layer(l).w.values(), grads.w[l].values(), lr, first_slot + 2 * l);
    step(net.layer(l).b, grads.b[l], lr, first_slot + 2 * l + 1);
  }
}

std::vector<int> argmax_rows(const Matrix& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c)
      if (row[c] > row[best]) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

}  // namespace emt::lab
