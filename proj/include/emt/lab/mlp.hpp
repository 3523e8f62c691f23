#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "emt/kernels.hpp"
#include "emt/matrix.hpp"
#include "emt/rng.hpp"

namespace emt::lab {

enum class Activation { Relu, Tanh };
std::string_view to_string(Activation a);
Activation parse_activation(std::string_view s);

struct DenseLayer {
  Matrix w;  // out x in
  std::vector<double> b;

  /// PyTorch default: w, b ~ U(-1/sqrt(in), 1/sqrt(in)).
  void init(Rng& rng);
};

/// Per-layer gradient buffers, shaped like the network.
struct MlpGrads {
  std::vector<Matrix> w;
  std::vector<std::vector<double>> b;
};

/// Fully connected network, activation after every layer except the last.
class Mlp {
 public:
  Mlp() = default;
  /// widths = {input, hidden..., output}.
  Mlp(std::vector<int> widths, Activation act, Rng& rng);

  std::size_t num_layers() const { return layers_.size(); }
  DenseLayer& layer(std::size_t i) { return layers_[i]; }
  const DenseLayer& layer(std::size_t i) const { return layers_[i]; }
  DenseLayer& classifier() { return layers_.back(); }
  Activation activation() const { return act_; }
  std::size_t input_dim() const { return layers_.front().w.cols(); }
  std::size_t output_dim() const { return layers_.back().w.rows(); }

  /// Layer inputs recorded by forward(); acts[0] is x, acts.back() the logits.
  struct Tape {
    std::vector<Matrix> acts;
  };

  Matrix forward(const Matrix& x, kernels::Backend be, Tape* tape = nullptr) const;
  /// Gradients of the loss whose logit gradient is grad_logits. Also
  /// returns d loss / d x when grad_input is non-null.
  MlpGrads backward(const Tape& tape, const Matrix& grad_logits, kernels::Backend be,
                    Matrix* grad_input = nullptr) const;

  MlpGrads zero_grads() const;
  /// Parameters flattened layer by layer (w then b).
  std::vector<double> flat_params() const;

 private:
  std::vector<DenseLayer> layers_;
  Activation act_ = Activation::Relu;
};

/// SGD with momentum and L2 weight decay, PyTorch update order:
/// v = mu*v + (g + lambda*theta); theta -= lr*v.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(std::span<double> param, std::span<const double> grad, double lr, std::size_t slot);
  void step(Mlp& net, const MlpGrads& grads, double lr, std::size_t first_slot = 0);
  void reset() { velocity_.clear(); }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<double>> velocity_;
};

/// Row argmax, lowest index on ties.
std::vector<int> argmax_rows(const Matrix& logits);

}  // namespace emt::lab
